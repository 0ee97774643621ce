//! Explicit Runge-Kutta time stepping under the DG CFL bound.

use serde::{Deserialize, Serialize};

use crate::dg::Solution;
use crate::{Error, Result};

/// Multiplier applied to the strict CFL bound.
pub const SAFETY: f64 = 0.9;

/// CFL constants of one refinement level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CflParams {
    pub courant: f64,
    pub fbar: f64,
    pub degree: usize,
}

impl CflParams {
    pub fn new(courant: f64, fbar: f64, degree: usize) -> Result<Self> {
        if !(courant > 0.0 && courant < 1.0) {
            return Err(Error::Config(format!("CFL constant {courant} must lie in (0, 1)")));
        }
        if !(fbar > 0.0 && fbar < 1.0) {
            return Err(Error::Config(format!("merge threshold {fbar} must lie in (0, 1)")));
        }
        Ok(CflParams { courant, fbar, degree })
    }
}

/// `τ = 0.9 h C f̄ / (c (1 + 2p))`.
pub fn cfl_timestep(h: f64, params: &CflParams, c: f64) -> f64 {
    SAFETY * h * params.courant * params.fbar / (c * (1 + 2 * params.degree) as f64)
}

/// Smallest level step; `c` is the largest wave speed over all phases.
pub fn global_timestep(levels: &[(f64, CflParams)], c: f64) -> f64 {
    levels
        .iter()
        .map(|(h, p)| cfl_timestep(*h, p, c))
        .fold(f64::INFINITY, f64::min)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RkScheme {
    /// Two-stage strong-stability-preserving (Heun).
    Ssp2,
    /// Three-stage strong-stability-preserving (Shu-Osher).
    Ssp3,
    /// Classical four-stage.
    Rk4,
}

impl RkScheme {
    /// Scheme whose order matches the highest polynomial degree.
    pub fn for_degree(p: usize) -> Self {
        match p {
            0 | 1 => RkScheme::Ssp2,
            2 => RkScheme::Ssp3,
            _ => RkScheme::Rk4,
        }
    }

    pub fn order(self) -> usize {
        match self {
            RkScheme::Ssp2 => 2,
            RkScheme::Ssp3 => 3,
            RkScheme::Rk4 => 4,
        }
    }
}

/// Vector-space operations needed by the integrators.
pub trait RkVector: Clone {
    /// `self += a x`.
    fn axpy(&mut self, a: f64, x: &Self);
    /// `self = a self + b x`.
    fn blend(&mut self, a: f64, b: f64, x: &Self);
    fn all_finite(&self) -> bool;
}

fn axpy_slice(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn blend_slice(y: &mut [f64], a: f64, b: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = a * *yi + b * xi;
    }
}

impl RkVector for Vec<f64> {
    fn axpy(&mut self, a: f64, x: &Self) {
        axpy_slice(self, a, x);
    }

    fn blend(&mut self, a: f64, b: f64, x: &Self) {
        blend_slice(self, a, b, x);
    }

    fn all_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

impl RkVector for Solution {
    fn axpy(&mut self, a: f64, x: &Self) {
        axpy_slice(&mut self.data, a, &x.data);
    }

    fn blend(&mut self, a: f64, b: f64, x: &Self) {
        blend_slice(&mut self.data, a, b, &x.data);
    }

    fn all_finite(&self) -> bool {
        self.is_finite()
    }
}

impl RkVector for Vec<Solution> {
    fn axpy(&mut self, a: f64, x: &Self) {
        for (y, x) in self.iter_mut().zip(x) {
            y.axpy(a, x);
        }
    }

    fn blend(&mut self, a: f64, b: f64, x: &Self) {
        for (y, x) in self.iter_mut().zip(x) {
            y.blend(a, b, x);
        }
    }

    fn all_finite(&self) -> bool {
        self.iter().all(Solution::is_finite)
    }
}

/// Advances `y` from `t` to `t + tau`. `rhs(t, y, out)` writes `dy/dt`.
/// `step` only labels the error when the new state is not finite.
pub fn rk_step<V: RkVector>(
    scheme: RkScheme,
    t: f64,
    tau: f64,
    y: &mut V,
    step: usize,
    mut rhs: impl FnMut(f64, &V, &mut V) -> Result<()>,
) -> Result<()> {
    let mut k = y.clone();
    match scheme {
        RkScheme::Ssp2 => {
            rhs(t, y, &mut k)?;
            let mut y1 = y.clone();
            y1.axpy(tau, &k);
            rhs(t + tau, &y1, &mut k)?;
            y1.axpy(tau, &k);
            y1.axpy(-1.0, y);
            y.axpy(0.5, &y1);
        }
        RkScheme::Ssp3 => {
            rhs(t, y, &mut k)?;
            let mut s = y.clone();
            s.axpy(tau, &k);
            rhs(t + tau, &s, &mut k)?;
            s.axpy(tau, &k);
            s.axpy(-1.0, y);
            s.blend(0.25, 1.0, y);
            rhs(t + 0.5 * tau, &s, &mut k)?;
            s.axpy(tau, &k);
            s.axpy(-1.0, y);
            y.axpy(2.0 / 3.0, &s);
        }
        RkScheme::Rk4 => {
            let mut acc = y.clone();
            let mut s = y.clone();
            rhs(t, y, &mut k)?;
            acc.axpy(tau / 6.0, &k);
            s.axpy(0.5 * tau, &k);
            rhs(t + 0.5 * tau, &s, &mut k)?;
            acc.axpy(tau / 3.0, &k);
            s.blend(0.0, 1.0, y);
            s.axpy(0.5 * tau, &k);
            rhs(t + 0.5 * tau, &s, &mut k)?;
            acc.axpy(tau / 3.0, &k);
            s.blend(0.0, 1.0, y);
            s.axpy(tau, &k);
            rhs(t + tau, &s, &mut k)?;
            acc.axpy(tau / 6.0, &k);
            *y = acc;
        }
    }
    if !y.all_finite() {
        return Err(Error::NonFiniteState { step, time: t + tau });
    }
    Ok(())
}
