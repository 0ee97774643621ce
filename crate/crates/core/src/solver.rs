//! Single-level time integration driver.

use crate::dg::{Discretization, PointSource, Solution};
use crate::time::{cfl_timestep, rk_step, CflParams, RkScheme};
use crate::{Error, Result};

/// A discretization together with its evolving solution.
pub struct Solver {
    pub disc: Discretization,
    pub sol: Solution,
    pub sources: Vec<PointSource>,
    pub t: f64,
    pub step: usize,
    pub tau: f64,
    pub scheme: RkScheme,
}

impl Solver {
    pub fn new(disc: Discretization, sol: Solution, courant: f64) -> Result<Self> {
        let params = CflParams::new(courant, disc.mesh.fbar, disc.degree)?;
        let c = disc.max_wave_speed();
        if !(c > 0.0) {
            return Err(Error::InvalidMaterial("wave speed must be positive".into()));
        }
        let tau = cfl_timestep(disc.mesh.grid.min_h(), &params, c);
        let scheme = RkScheme::for_degree(disc.degree);
        Ok(Solver {
            disc,
            sol,
            sources: Vec::new(),
            t: 0.0,
            step: 0,
            tau,
            scheme,
        })
    }

    /// One step of length `tau` (or less).
    pub fn step_by(&mut self, tau: f64) -> Result<()> {
        let Solver { disc, sol, sources, .. } = self;
        rk_step(self.scheme, self.t, tau, sol, self.step, |t, y, out| {
            disc.rhs_into(t, y, sources, None, out);
            Ok(())
        })?;
        self.t += tau;
        self.step += 1;
        Ok(())
    }

    /// Steps until `t_end`, shortening the last step to land on it exactly.
    /// `observer` runs after every step.
    pub fn advance_to(&mut self, t_end: f64, mut observer: impl FnMut(&Solver) -> Result<()>) -> Result<()> {
        while self.t < t_end * (1.0 - 1e-14) {
            let tau = self.tau.min(t_end - self.t);
            self.step_by(tau)?;
            if (t_end - self.t).abs() <= 1e-14 * t_end.abs().max(1.0) {
                self.t = t_end;
            }
            observer(self)?;
        }
        Ok(())
    }
}
