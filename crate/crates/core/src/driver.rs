//! Simulation driver: builds discretizations from a [`ProblemConfig`], runs
//! them with file outputs, and runs convergence studies.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use log::info;
use serde::Serialize;

use crate::amr::{energy_tag, AmrSolver, RegridRecord};
use crate::config::{BcSpec, DirectionSpec, InitialSpec, ProblemConfig, TagSpec};
use crate::dg::{BcTable, BoundaryCondition, Discretization, PointSource, Solution};
use crate::geometry::{Expr, LevelSet, PhaseSign, Point};
use crate::mesh::{build_mesh, MeshOptions};
use crate::output::{sample_fields, write_receiver_csv, write_text, write_vtk, SampledField, SnapshotPart};
use crate::physics::{exact_solution, i_n_t, plane_wave_modes, Material, PlaneWaveMode, State};
use crate::solver::Solver;
use crate::{Error, Result};

/// Plane-wave superposition with known evolution.
#[derive(Clone, Debug)]
pub struct ExactSolution {
    pub kappa: [f64; 2],
    pub modes: Arc<Vec<PlaneWaveMode>>,
}

impl ExactSolution {
    pub fn new(kappa: [f64; 2], mat: &Material) -> Result<Self> {
        Ok(ExactSolution {
            kappa,
            modes: Arc::new(plane_wave_modes(kappa, mat)?),
        })
    }

    pub fn state(&self, x: Point, t: f64) -> State {
        exact_solution(t, x, &self.modes, self.kappa)
    }

    /// `2π/ω_max`.
    pub fn period(&self) -> f64 {
        let w = self.modes.iter().map(|m| m.omega).fold(0.0, f64::max);
        2.0 * std::f64::consts::PI / w
    }
}

/// A validated configuration with its geometry and materials built.
#[derive(Clone)]
pub struct Problem {
    pub config: ProblemConfig,
    pub ls: LevelSet,
    pub materials: Vec<Material>,
    pub exact: Option<ExactSolution>,
}

impl Problem {
    pub fn new(config: ProblemConfig) -> Result<Self> {
        config.validate()?;
        let ls = config.geometry.build()?;
        let materials = config.phases.iter().map(|p| p.build()).collect::<Result<Vec<_>>>()?;
        let exact = match config.plane_wave_kappa() {
            Some(k) => Some(ExactSolution::new(k, &materials[0])?),
            None => None,
        };
        Ok(Problem {
            config,
            ls,
            materials,
            exact,
        })
    }

    pub fn final_time(&self) -> f64 {
        self.config
            .time
            .end
            .or_else(|| self.exact.as_ref().map(ExactSolution::period))
            .expect("validated: end time or plane wave")
    }

    pub fn phases(&self) -> Vec<PhaseSign> {
        self.config.phase_signs()
    }

    pub fn material(&self, phase: PhaseSign) -> Option<&Material> {
        self.phases()
            .iter()
            .position(|&p| p == phase)
            .map(|i| &self.materials[i])
    }

    pub fn mesh_options(&self, degree: usize) -> MeshOptions {
        let d = &self.config.discretization;
        let mut opts = MeshOptions::for_degree(d.fbar, degree).periodic(self.config.domain.periodic);
        if let Some(q) = d.q {
            opts.q = q;
            opts.cut_q = opts.cut_q.max(q);
        }
        if let Some(cq) = d.cut_q {
            opts = opts.cut_order(cq);
        }
        opts
    }

    fn bc(&self, spec: &BcSpec) -> BoundaryCondition {
        match spec {
            BcSpec::Free => BoundaryCondition::free_surface(),
            BcSpec::Fixed => BoundaryCondition::fixed(),
            BcSpec::Absorbing => BoundaryCondition::Absorbing,
            BcSpec::Periodic => BoundaryCondition::Periodic,
            BcSpec::Velocity { value } => {
                let v = *value;
                BoundaryCondition::Velocity(Arc::new(move |_, _| v))
            }
            BcSpec::Traction { value } => {
                let v = *value;
                BoundaryCondition::Traction(Arc::new(move |_, _, _| v))
            }
            BcSpec::ExactVelocity => {
                let ex = self.exact.clone().expect("validated: plane wave");
                let rho = self.materials[0].rho;
                BoundaryCondition::Velocity(Arc::new(move |t, x| {
                    let u = ex.state(x, t);
                    [u[0] / rho, u[1] / rho]
                }))
            }
            BcSpec::ExactTraction => {
                let ex = self.exact.clone().expect("validated: plane wave");
                let mat = self.materials[0];
                BoundaryCondition::Traction(Arc::new(move |t, x, n| {
                    let u = ex.state(x, t);
                    i_n_t(n, mat.stress([u[2], u[3], u[4]]))
                }))
            }
        }
    }

    pub fn bcs(&self) -> Result<BcTable> {
        let sides = self.config.side_bcs()?;
        Ok(BcTable {
            sides: std::array::from_fn(|k| self.bc(&sides[k])),
            contour: self.bc(self.config.boundary.contour.as_ref().unwrap_or(&BcSpec::Free)),
        })
    }

    /// Discretization on a `cells` grid at `degree`.
    pub fn discretization(&self, cells: [usize; 2], degree: usize) -> Result<Discretization> {
        let mesh = build_mesh(
            self.config.rect()?,
            cells,
            &self.ls,
            &self.phases(),
            &self.mesh_options(degree),
        )?;
        Discretization::new(mesh, degree, self.materials.clone(), self.bcs()?)
    }

    /// Pointwise initial state in `phase`.
    pub fn initial_field(&self) -> Result<Box<dyn Fn(Point, PhaseSign) -> State + Sync + '_>> {
        Ok(match &self.config.initial {
            InitialSpec::Zero => Box::new(|_, _| [0.0; 5]),
            InitialSpec::PlaneWave { .. } => {
                let ex = self.exact.as_ref().expect("validated: plane wave");
                Box::new(move |x, _| ex.state(x, 0.0))
            }
            InitialSpec::Pulse {
                kappa,
                center,
                sharpness,
            } => {
                let norm = kappa[0].hypot(kappa[1]);
                let dir = [kappa[0] / norm, kappa[1] / norm];
                let mut shapes = Vec::new();
                for (p, mat) in self.phases().into_iter().zip(&self.materials) {
                    let modes = plane_wave_modes(*kappa, mat)?;
                    let fastest = modes
                        .iter()
                        .max_by(|a, b| a.omega.total_cmp(&b.omega))
                        .expect("five modes")
                        .u;
                    shapes.push((p, fastest));
                }
                let (c, a) = (*center, *sharpness);
                Box::new(move |x, phase| {
                    let s = (x[0] - c[0]) * dir[0] + (x[1] - c[1]) * dir[1];
                    let g = (-a * s * s).exp();
                    let u = shapes.iter().find(|(p, _)| *p == phase).map_or([0.0; 5], |(_, u)| *u);
                    u.map(|v| v * g)
                })
            }
            InitialSpec::Expression { components } => {
                let exprs = components.iter().map(|s| Expr::parse(s)).collect::<Result<Vec<_>>>()?;
                Box::new(move |x, _| std::array::from_fn(|c| exprs[c].eval(x)))
            }
        })
    }

    /// Unit force direction of source `k`.
    pub fn source_direction(&self, k: usize) -> Result<[f64; 2]> {
        let s = &self.config.sources[k];
        let normal = || {
            let g = self.ls.gradient(s.position);
            let n = g[0].hypot(g[1]);
            if !(n > 0.0) {
                return Err(Error::DegenerateGradient(s.position));
            }
            Ok([g[0] / n, g[1] / n])
        };
        match &s.direction {
            DirectionSpec::Fixed { vector } => Ok(*vector),
            DirectionSpec::BoundaryNormal => normal(),
            DirectionSpec::InterfaceParallel => normal().map(|n| [-n[1], n[0]]),
        }
    }

    pub fn point_sources(&self, disc: &Discretization) -> Result<Vec<PointSource>> {
        (0..self.config.sources.len())
            .map(|k| {
                let s = &self.config.sources[k];
                disc.point_source(&self.ls, s.phase, s.position, self.source_direction(k)?, s.ricker)
            })
            .collect()
    }
}

/// Single-level or two-level time integrator.
pub enum Engine {
    Single(Box<Solver>),
    Amr(Box<AmrSolver>),
}

impl Engine {
    /// Builds the integrator of `problem` on a `cells` grid at `degree`.
    pub fn new(problem: &Problem, cells: [usize; 2], degree: usize) -> Result<Self> {
        let disc = problem.discretization(cells, degree)?;
        let init = problem.initial_field()?;
        let sol = disc.project(&*init);
        let courant = problem.config.discretization.courant;
        let amr = problem.config.amr.as_ref().filter(|a| a.enabled);
        let Some(amr) = amr else {
            let sources = problem.point_sources(&disc)?;
            let mut s = Solver::new(disc, sol, courant)?;
            s.sources = sources;
            return Ok(Engine::Single(Box::new(s)));
        };
        let mut s = AmrSolver::new(disc, sol, problem.ls.clone(), amr.params(), courant)?;
        for k in 0..problem.config.sources.len() {
            let src = &problem.config.sources[k];
            s.add_source(src.phase, src.position, problem.source_direction(k)?, src.ricker)?;
        }
        match &amr.tag {
            TagSpec::Energy { e0 } => {
                s = s.with_tagger(energy_tag(*e0));
                s.regrid()?;
                // fine data straight from the initial condition
                if let Some(f) = &mut s.fine {
                    f.sol = f.disc.project(&*init);
                }
                s.restrict();
            }
            TagSpec::Static { lo, hi } => {
                let g = &s.coarse.mesh.grid;
                let cells: Vec<bool> = (0..g.num_cells())
                    .map(|c| {
                        let x = g.cell(c).center();
                        (0..2).all(|k| x[k] >= lo[k] && x[k] <= hi[k])
                    })
                    .collect();
                s.set_refined(&cells)?;
                if let Some(f) = &mut s.fine {
                    f.sol = f.disc.project(&*init);
                }
                s.restrict();
            }
        }
        Ok(Engine::Amr(Box::new(s)))
    }

    pub fn t(&self) -> f64 {
        match self {
            Engine::Single(s) => s.t,
            Engine::Amr(s) => s.t,
        }
    }

    pub fn steps(&self) -> usize {
        match self {
            Engine::Single(s) => s.step,
            Engine::Amr(s) => s.step,
        }
    }

    pub fn tau(&self) -> f64 {
        match self {
            Engine::Single(s) => s.tau,
            Engine::Amr(s) => s.tau,
        }
    }

    pub fn step_by(&mut self, tau: f64) -> Result<()> {
        match self {
            Engine::Single(s) => s.step_by(tau),
            Engine::Amr(s) => s.step_by(tau),
        }
    }

    /// Steps until `t_end`, landing on it exactly; `observer` runs after
    /// every step.
    pub fn advance_to(&mut self, t_end: f64, mut observer: impl FnMut(&Engine) -> Result<()>) -> Result<()> {
        while self.t() < t_end * (1.0 - 1e-14) {
            let tau = self.tau().min(t_end - self.t());
            self.step_by(tau)?;
            if (t_end - self.t()).abs() <= 1e-14 * t_end.abs().max(1.0) {
                match self {
                    Engine::Single(s) => s.t = t_end,
                    Engine::Amr(s) => s.t = t_end,
                }
            }
            observer(self)?;
        }
        Ok(())
    }

    pub fn energy(&self) -> f64 {
        match self {
            Engine::Single(s) => s.disc.total_energy(&s.sol),
            Engine::Amr(s) => s.energy(),
        }
    }

    pub fn evaluate_at(&self, phase: PhaseSign, x: Point) -> Option<State> {
        match self {
            Engine::Single(s) => s.disc.evaluate_at(&s.sol, phase, x).map(|(_, u)| u),
            Engine::Amr(s) => s.evaluate_at(phase, x),
        }
    }

    pub fn error_measures(&self, exact: &ExactSolution) -> (f64, f64) {
        let f = |x: Point, t: f64| exact.state(x, t);
        match self {
            Engine::Single(s) => s.disc.error_measures(&s.sol, f, s.t),
            Engine::Amr(s) => s.error_measures(f, s.t),
        }
    }

    pub fn num_elements(&self) -> usize {
        match self {
            Engine::Single(s) => s.disc.num_elements(),
            Engine::Amr(s) => s.coarse.num_elements() + s.fine.as_ref().map_or(0, |f| f.disc.num_elements()),
        }
    }

    pub fn regrids(&self) -> &[RegridRecord] {
        match self {
            Engine::Single(_) => &[],
            Engine::Amr(s) => &s.regrids,
        }
    }

    /// Fields sampled for a snapshot: level 1 where it exists, level 0
    /// elsewhere.
    pub fn sample(&self, ls: &LevelSet) -> SampledField {
        match self {
            Engine::Single(s) => sample_fields(
                ls,
                &[SnapshotPart {
                    disc: &s.disc,
                    sol: &s.sol,
                    include: None,
                    level: 0,
                }],
            ),
            Engine::Amr(s) => {
                let mut parts = Vec::new();
                let covered = s
                    .fine
                    .as_ref()
                    .map(|f| (0..s.coarse.num_elements()).map(|e| !f.interp.is_covered(e)).collect());
                parts.push(SnapshotPart {
                    disc: &s.coarse,
                    sol: &s.coarse_sol,
                    include: covered,
                    level: 0,
                });
                if let Some(f) = &s.fine {
                    parts.push(SnapshotPart {
                        disc: &f.disc,
                        sol: &f.sol,
                        include: None,
                        level: 1,
                    });
                }
                sample_fields(ls, &parts)
            }
        }
    }

    pub fn solution(&self) -> (&Discretization, &Solution) {
        match self {
            Engine::Single(s) => (&s.disc, &s.sol),
            Engine::Amr(s) => (&s.coarse, &s.coarse_sol),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ReceiverSeries {
    pub name: String,
    pub position: Point,
    /// `(t, v1, v2)`.
    pub samples: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub name: String,
    pub cells: [usize; 2],
    pub degree: usize,
    pub q: usize,
    pub cut_q: usize,
    pub elements: usize,
    pub steps: usize,
    pub final_time: f64,
    pub tau: f64,
    pub initial_energy: f64,
    pub final_energy: f64,
    /// `(e_L∞, e_L2)` for plane-wave runs.
    pub errors: Option<(f64, f64)>,
    /// `(step, t, energy)` at the log cadence.
    pub energy_log: Vec<(usize, f64, f64)>,
    #[serde(skip)]
    pub receivers: Vec<ReceiverSeries>,
    pub regrids: Vec<RegridRecord>,
    pub snapshots: Vec<PathBuf>,
    pub elapsed_seconds: f64,
}

/// Runs `problem` to its final time. With `out`, writes the run log,
/// receiver CSVs, VTK snapshots, the regrid table, an error report (plane
/// waves) and a JSON summary into that directory.
pub fn run(problem: &Problem, out: Option<&Path>) -> Result<RunReport> {
    let cfg = &problem.config;
    let start = Instant::now();
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let cells = cfg.domain.cells;
    let degree = cfg.discretization.degree;
    let mut engine = Engine::new(problem, cells, degree)?;
    let t_end = problem.final_time();
    let opts = problem.mesh_options(degree);
    info!(
        "{}: {} elements, tau = {:.4e}, t_end = {t_end:.4e}",
        cfg.name,
        engine.num_elements(),
        engine.tau()
    );

    let mut receivers: Vec<ReceiverSeries> = cfg
        .receivers
        .iter()
        .map(|r| ReceiverSeries {
            name: r.name.clone(),
            position: r.position,
            samples: Vec::new(),
        })
        .collect();
    let sample_receivers = |engine: &Engine, receivers: &mut Vec<ReceiverSeries>| -> Result<()> {
        for (r, series) in cfg.receivers.iter().zip(receivers.iter_mut()) {
            let u = engine
                .evaluate_at(r.phase, r.position)
                .ok_or_else(|| Error::Config(format!("receiver '{}' is outside the {} phase", r.name, r.phase)))?;
            let rho = problem.material(r.phase).expect("validated phase").rho;
            series.samples.push([engine.t(), u[0] / rho, u[1] / rho]);
        }
        Ok(())
    };
    sample_receivers(&engine, &mut receivers)?;

    let initial_energy = engine.energy();
    let mut energy_log = vec![(0, 0.0, initial_energy)];
    let mut log = String::from("# step t tau energy\n");
    let _ = writeln!(log, "0 {:e} {:e} {:e}", 0.0, engine.tau(), initial_energy);

    let mut targets: Vec<f64> = cfg
        .output
        .snapshot_times
        .iter()
        .copied()
        .filter(|&t| t > 0.0 && t <= t_end)
        .collect();
    targets.sort_by(f64::total_cmp);
    let mut snapshots = Vec::new();
    let write_snapshot = |engine: &Engine, snapshots: &mut Vec<PathBuf>| -> Result<()> {
        if let Some(dir) = out {
            let path = dir.join(format!("snapshot_{:03}.vtk", snapshots.len()));
            let title = format!("{} t={:e}", cfg.name, engine.t());
            write_vtk(&path, &title, &engine.sample(&problem.ls))?;
            snapshots.push(path);
        }
        Ok(())
    };
    if cfg.output.snapshot_times.contains(&0.0) {
        write_snapshot(&engine, &mut snapshots)?;
    }

    let every = cfg.output.receiver_every;
    let log_every = cfg.output.log_every;
    let mut stops = targets.clone();
    if stops.last().is_none_or(|&t| t < t_end) {
        stops.push(t_end);
    }
    for stop in stops {
        engine.advance_to(stop, |e| {
            if e.steps() % every == 0 {
                sample_receivers(e, &mut receivers)?;
            }
            if e.steps() % log_every == 0 {
                let en = e.energy();
                energy_log.push((e.steps(), e.t(), en));
                let _ = writeln!(log, "{} {:e} {:e} {:e}", e.steps(), e.t(), e.tau(), en);
                info!("step {} t = {:.4e} E = {en:.6e}", e.steps(), e.t());
            }
            Ok(())
        })?;
        if targets.contains(&stop) {
            write_snapshot(&engine, &mut snapshots)?;
        }
    }
    if engine.steps() % every != 0 {
        sample_receivers(&engine, &mut receivers)?;
    }
    let final_energy = engine.energy();
    if energy_log.last().is_some_and(|l| l.0 != engine.steps()) {
        energy_log.push((engine.steps(), engine.t(), final_energy));
        let _ = writeln!(
            log,
            "{} {:e} {:e} {:e}",
            engine.steps(),
            engine.t(),
            engine.tau(),
            final_energy
        );
    }
    let errors = problem.exact.as_ref().map(|ex| engine.error_measures(ex));

    let report = RunReport {
        name: cfg.name.clone(),
        cells,
        degree,
        q: opts.q,
        cut_q: opts.cut_q,
        elements: engine.num_elements(),
        steps: engine.steps(),
        final_time: engine.t(),
        tau: engine.tau(),
        initial_energy,
        final_energy,
        errors,
        energy_log,
        receivers,
        regrids: engine.regrids().to_vec(),
        snapshots,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out {
        write_text(&dir.join("run.log"), &log)?;
        for r in &report.receivers {
            write_receiver_csv(&dir.join(format!("receiver_{}.csv", r.name)), &r.samples)?;
        }
        if let Some((linf, l2)) = errors {
            let text = serde_json::json!({ "t": report.final_time, "e_linf": linf, "e_l2": l2 });
            write_text(&dir.join("errors.json"), &format!("{text:#}\n"))?;
        }
        if cfg.amr.as_ref().is_some_and(|a| a.enabled) {
            let mut csv = String::from("step,time,tagged_cells,fine_elements,tau\n");
            for r in &report.regrids {
                let _ = writeln!(
                    csv,
                    "{},{:e},{},{},{:e}",
                    r.step, r.time, r.tagged_cells, r.fine_elements, r.tau
                );
            }
            write_text(&dir.join("regrid.csv"), &csv)?;
        }
        let summary = serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?;
        write_text(&dir.join("summary.json"), &(summary + "\n"))?;
        let config = toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?;
        write_text(&dir.join("config.toml"), &config)?;
    }
    Ok(report)
}

/// One `(grid, degree)` entry of a convergence study.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub degree: usize,
    pub cells: usize,
    pub h: f64,
    pub steps: usize,
    pub e_linf: f64,
    pub e_l2: f64,
    /// Slopes against the previous grid of the same degree.
    pub rate_linf: Option<f64>,
    pub rate_l2: Option<f64>,
}

/// Least-squares log-log slopes per degree.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ConvergenceFit {
    pub degree: usize,
    /// `None` when the errors are at rounding level.
    pub order_linf: Option<f64>,
    pub order_l2: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    pub fits: Vec<ConvergenceFit>,
}

/// Errors below this are treated as exact and get no slope.
pub const ROUNDING_LEVEL: f64 = 1e-12;

/// Least-squares slope of `log e` against `log h`, over the points whose
/// error is above rounding level; `None` when fewer than two remain.
pub fn observed_order(h: &[f64], e: &[f64]) -> Option<f64> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = h
        .iter()
        .zip(e)
        .filter(|(_, &v)| v > ROUNDING_LEVEL)
        .map(|(h, v)| (h.ln(), v.ln()))
        .unzip();
    if xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let (xm, ym) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - xm) * (x - xm)).sum();
    Some(sxy / sxx)
}

impl ConvergenceTable {
    pub fn fit(&self, degree: usize) -> Option<&ConvergenceFit> {
        self.fits.iter().find(|f| f.degree == degree)
    }

    pub fn to_csv(&self) -> String {
        let fmt = |r: Option<f64>| r.map_or_else(|| "exact".to_string(), |v| format!("{v:.4}"));
        let mut s = String::from("degree,cells,h,steps,e_linf,e_l2,rate_linf,rate_l2\n");
        for (k, r) in self.rows.iter().enumerate() {
            let first = k == 0 || self.rows[k - 1].degree != r.degree;
            let rate = |v: Option<f64>| if first { String::new() } else { fmt(v) };
            let _ = writeln!(
                s,
                "{},{},{:e},{},{:e},{:e},{},{}",
                r.degree,
                r.cells,
                r.h,
                r.steps,
                r.e_linf,
                r.e_l2,
                rate(r.rate_linf),
                rate(r.rate_l2)
            );
        }
        s.push_str("\ndegree,order_linf,order_l2\n");
        for f in &self.fits {
            let _ = writeln!(s, "{},{},{}", f.degree, fmt(f.order_linf), fmt(f.order_l2));
        }
        s
    }
}

/// Runs `problem` on square-refined grids (`n` cells along the first axis,
/// the second axis scaled to keep the aspect ratio) for every degree, to the
/// problem's final time.
pub fn convergence_study(problem: &Problem, grids: &[usize], degrees: &[usize]) -> Result<ConvergenceTable> {
    let exact = problem
        .exact
        .as_ref()
        .ok_or_else(|| Error::Config("convergence studies need a plane-wave initial condition".into()))?;
    let base = problem.config.domain.cells;
    let t_end = problem.final_time();
    let extent = problem.config.rect()?.extent();
    let mut table = ConvergenceTable::default();
    for &p in degrees {
        let mut prev: Option<(f64, f64, f64)> = None;
        let mut hs = Vec::new();
        let (mut linf, mut l2) = (Vec::new(), Vec::new());
        for &n in grids {
            let cells = [n, (n * base[1]).div_ceil(base[0]).max(1)];
            let mut engine = Engine::new(problem, cells, p)?;
            engine.advance_to(t_end, |_| Ok(()))?;
            let (ei, e2) = engine.error_measures(exact);
            let h = extent[0] / n as f64;
            let rate = |a: f64, b: f64, ha: f64| observed_order(&[ha, h], &[a, b]);
            let (rate_linf, rate_l2) = match prev {
                Some((ha, a, b)) => (rate(a, ei, ha), rate(b, e2, ha)),
                None => (None, None),
            };
            info!("p = {p}, n = {n}: e_linf = {ei:.3e}, e_l2 = {e2:.3e}");
            table.rows.push(ConvergenceRow {
                degree: p,
                cells: n,
                h,
                steps: engine.steps(),
                e_linf: ei,
                e_l2: e2,
                rate_linf,
                rate_l2,
            });
            prev = Some((h, ei, e2));
            hs.push(h);
            linf.push(ei);
            l2.push(e2);
        }
        table.fits.push(ConvergenceFit {
            degree: p,
            order_linf: observed_order(&hs, &linf),
            order_l2: observed_order(&hs, &l2),
        });
    }
    Ok(table)
}
