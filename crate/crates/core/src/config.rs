//! Problem configuration: a strict TOML schema, material presets and the
//! shipped problem presets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::amr::AmrParams;
use crate::geometry::{structured_lattice, BackgroundRect, LevelSet, PhaseSign, Point};
use crate::physics::Material;
use crate::{Error, Result};

/// Shipped presets as `(name, TOML source)`.
pub const PRESETS: &[(&str, &str)] = &[
    ("circle_convergence", include_str!("../presets/circle_convergence.toml")),
    ("biphase_periodic", include_str!("../presets/biphase_periodic.toml")),
    ("lamb2d", include_str!("../presets/lamb2d.toml")),
    ("single_interface", include_str!("../presets/single_interface.toml")),
    ("structured2d", include_str!("../presets/structured2d.toml")),
    ("pulse_amr", include_str!("../presets/pulse_amr.toml")),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    #[serde(default)]
    pub name: String,
    pub domain: DomainConfig,
    pub geometry: LevelSetSpec,
    pub phases: Vec<PhaseConfig>,
    pub discretization: DiscretizationConfig,
    pub boundary: BoundaryConfig,
    pub initial: InitialSpec,
    #[serde(default)]
    pub sources: Vec<SourceConfig>,
    #[serde(default)]
    pub receivers: Vec<ReceiverConfig>,
    pub time: TimeConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub amr: Option<AmrConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub lo: Point,
    pub hi: Point,
    pub cells: [usize; 2],
    #[serde(default)]
    pub periodic: [bool; 2],
}

/// Level-set function `φ`; the phases are its sign regions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LevelSetSpec {
    /// `R² − |x − o|²`.
    Circle {
        center: Point,
        radius: f64,
    },
    /// `a·x + b`.
    Plane {
        coeffs: [f64; 2],
        offset: f64,
    },
    /// `A cos(2πk x₁) cos(2πk x₂) + s`.
    TrigProduct {
        amplitude: f64,
        wavenumber: f64,
        shift: f64,
    },
    Constant {
        value: f64,
    },
    /// Arithmetic expression in `x1`, `x2`.
    Expression {
        source: String,
    },
    /// Diagonal strut lattice between homogeneous ends.
    Lattice {
        length: f64,
        width: f64,
        delta1: f64,
        delta2: f64,
    },
}

impl LevelSetSpec {
    pub fn build(&self) -> Result<LevelSet> {
        Ok(match self {
            LevelSetSpec::Circle { center, radius } => {
                if !(*radius > 0.0) {
                    return Err(Error::Config(format!("circle radius {radius} must be positive")));
                }
                LevelSet::circle(*center, *radius)
            }
            LevelSetSpec::Plane { coeffs, offset } => {
                if coeffs[0] == 0.0 && coeffs[1] == 0.0 {
                    return Err(Error::Config("plane coefficients must not both vanish".into()));
                }
                LevelSet::plane(*coeffs, *offset)
            }
            LevelSetSpec::TrigProduct {
                amplitude,
                wavenumber,
                shift,
            } => LevelSet::trig_product(*amplitude, *wavenumber, *shift),
            LevelSetSpec::Constant { value } => LevelSet::constant(*value),
            LevelSetSpec::Expression { source } => LevelSet::expression(source)?,
            LevelSetSpec::Lattice {
                length,
                width,
                delta1,
                delta2,
            } => structured_lattice(*length, *width, *delta1, *delta2)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub sign: PhaseSign,
    pub material: MaterialSpec,
    /// Angle (degrees) of the frame the stiffness is given in.
    #[serde(default)]
    pub rotation_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MaterialSpec {
    Preset {
        name: String,
    },
    /// Plane-strain isotropic solid from Young's modulus and Poisson ratio.
    Isotropic {
        rho: f64,
        young: f64,
        poisson: f64,
    },
    /// Isotropic solid from its P- and S-wave speeds.
    Speeds {
        rho: f64,
        cp: f64,
        cs: f64,
    },
    /// Voigt stiffness `(11, 22, 12)`.
    Stiffness {
        rho: f64,
        c: [[f64; 3]; 3],
    },
}

/// Named materials: `(name, description)`.
pub const MATERIAL_PRESETS: &[(&str, &str)] = &[
    ("isotropic-unit", "rho = 1, Y = 1, nu = 0.3 (plane strain)"),
    ("copper", "rho = 8.92, c11 = c22 = 168, c12 = 121, c33 = 75"),
    ("anisotropic-2d", "rho = 1.6, fully anisotropic 2D stiffness"),
    ("lamb-rock", "rho = 2200, cP = 3200, cS = 1847.5"),
    (
        "interface-orthorhombic",
        "rho = 7100, c11 = 165, c12 = 50, c22 = 62, c33 = 39.6 GPa",
    ),
    (
        "interface-isotropic",
        "rho = 7100, c11 = c22 = 165, c12 = 85.8, c33 = 39.6 GPa",
    ),
    ("structured-unit", "rho = 1, cP = 1, cS = 0.56"),
];

pub fn material_preset(name: &str) -> Result<Material> {
    const GPA: f64 = 1e9;
    match name {
        "isotropic-unit" => Material::isotropic(1.0, 0.3, 1.0),
        "copper" => Material::new(8.92, [[168.0, 121.0, 0.0], [121.0, 168.0, 0.0], [0.0, 0.0, 75.0]]),
        "anisotropic-2d" => Material::new(
            1.6,
            [
                [0.5637, 0.2963, 0.3158],
                [0.2963, 0.5637, 0.3158],
                [0.3158, 0.3158, 0.3111],
            ],
        ),
        "lamb-rock" => Material::from_speeds(2200.0, 3200.0, 1847.5),
        "interface-orthorhombic" => Material::new(
            7100.0,
            [
                [165.0 * GPA, 50.0 * GPA, 0.0],
                [50.0 * GPA, 62.0 * GPA, 0.0],
                [0.0, 0.0, 39.6 * GPA],
            ],
        ),
        "interface-isotropic" => Material::new(
            7100.0,
            [
                [165.0 * GPA, 85.8 * GPA, 0.0],
                [85.8 * GPA, 165.0 * GPA, 0.0],
                [0.0, 0.0, 39.6 * GPA],
            ],
        ),
        "structured-unit" => Material::from_speeds(1.0, 1.0, 0.56),
        _ => Err(Error::Config(format!(
            "unknown material preset '{name}' (known: {})",
            MATERIAL_PRESETS.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", ")
        ))),
    }
}

impl MaterialSpec {
    pub fn build(&self) -> Result<Material> {
        match self {
            MaterialSpec::Preset { name } => material_preset(name),
            MaterialSpec::Isotropic { rho, young, poisson } => Material::isotropic(*young, *poisson, *rho),
            MaterialSpec::Speeds { rho, cp, cs } => Material::from_speeds(*rho, *cp, *cs),
            MaterialSpec::Stiffness { rho, c } => Material::new(*rho, *c),
        }
    }
}

impl PhaseConfig {
    pub fn build(&self) -> Result<Material> {
        let m = self.material.build()?;
        if self.rotation_deg == 0.0 {
            Ok(m)
        } else {
            m.rotated(self.rotation_deg.to_radians())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscretizationConfig {
    pub degree: usize,
    #[serde(default = "default_fbar")]
    pub fbar: f64,
    /// Gauss points per direction on whole cells and faces (default p+2).
    #[serde(default)]
    pub q: Option<usize>,
    /// Gauss points per direction on cut cells and contours (default 2p+2).
    #[serde(default)]
    pub cut_q: Option<usize>,
    #[serde(default = "default_courant")]
    pub courant: f64,
}

fn default_fbar() -> f64 {
    0.3
}

fn default_courant() -> f64 {
    0.833
}

/// Boundary conditions per side of the rectangle and on the zero contour.
/// `sides` applies to every side not given individually.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundaryConfig {
    #[serde(default)]
    pub sides: Option<BcSpec>,
    #[serde(default)]
    pub left: Option<BcSpec>,
    #[serde(default)]
    pub right: Option<BcSpec>,
    #[serde(default)]
    pub bottom: Option<BcSpec>,
    #[serde(default)]
    pub top: Option<BcSpec>,
    #[serde(default)]
    pub contour: Option<BcSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BcSpec {
    /// Zero traction.
    Free,
    /// Zero velocity.
    Fixed,
    Absorbing,
    Periodic,
    /// Constant prescribed velocity.
    Velocity {
        value: [f64; 2],
    },
    /// Constant prescribed traction.
    Traction {
        value: [f64; 2],
    },
    /// Velocity of the plane-wave exact solution.
    ExactVelocity,
    /// Traction of the plane-wave exact solution.
    ExactTraction,
}

/// Initial state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialSpec {
    Zero,
    /// Superposition of all plane-wave modes of `kappa`; the exact solution
    /// is known and errors are reported.
    PlaneWave {
        kappa: [f64; 2],
    },
    /// The fastest forward mode of `kappa` under a Gaussian envelope
    /// `exp(−a ((x − c)·κ̂)²)`.
    Pulse {
        kappa: [f64; 2],
        center: Point,
        sharpness: f64,
    },
    /// Components `(m1, m2, g11, g22, g12)` as expressions in `x1`, `x2`.
    Expression {
        components: [String; 5],
    },
}

/// Direction of a point force.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DirectionSpec {
    Fixed {
        vector: [f64; 2],
    },
    /// `∇φ/|∇φ|` at the source point.
    BoundaryNormal,
    /// `∇φ/|∇φ|` turned by +90°.
    InterfaceParallel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    #[serde(default = "default_phase")]
    pub phase: PhaseSign,
    pub position: Point,
    pub direction: DirectionSpec,
    pub ricker: crate::dg::Ricker,
}

fn default_phase() -> PhaseSign {
    PhaseSign::Negative
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReceiverConfig {
    pub name: String,
    #[serde(default = "default_phase")]
    pub phase: PhaseSign,
    pub position: Point,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    /// Final time; defaults to one period `2π/ω_max` of a plane-wave
    /// initial condition.
    #[serde(default)]
    pub end: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Steps between run-log lines.
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Steps between receiver samples.
    #[serde(default = "one")]
    pub receiver_every: usize,
    /// Times at which VTK snapshots are written.
    #[serde(default)]
    pub snapshot_times: Vec<f64>,
}

fn default_log_every() -> usize {
    50
}

fn one() -> usize {
    1
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            log_every: default_log_every(),
            receiver_every: 1,
            snapshot_times: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmrConfig {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "default_ratio")]
    pub ratio: usize,
    pub fine_degree: usize,
    #[serde(default = "one")]
    pub buffer: usize,
    #[serde(default = "default_regrid")]
    pub regrid_every: usize,
    pub tag: TagSpec,
}

fn yes() -> bool {
    true
}

fn default_ratio() -> usize {
    4
}

fn default_regrid() -> usize {
    10
}

impl AmrConfig {
    pub fn params(&self) -> AmrParams {
        AmrParams {
            ratio: self.ratio,
            fine_degree: self.fine_degree,
            buffer: self.buffer,
            regrid_every: self.regrid_every,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TagSpec {
    /// `max_phase E^e − e0`, re-evaluated at every regrid.
    Energy { e0: f64 },
    /// A fixed refined box: coarse cells whose centers lie in `[lo, hi]`.
    Static { lo: Point, hi: Point },
}

impl ProblemConfig {
    pub fn from_toml(source: &str) -> Result<Self> {
        let cfg: ProblemConfig = toml::from_str(source).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a bare preset name loads the shipped preset.
    pub fn load(path_or_preset: &str) -> Result<Self> {
        let path = Path::new(path_or_preset);
        if !path.exists() {
            if let Some(cfg) = Self::preset(path_or_preset) {
                return cfg;
            }
        }
        let source = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&source)?;
        if cfg.name.is_empty() {
            cfg.name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
        }
        Ok(cfg)
    }

    pub fn preset(name: &str) -> Option<Result<Self>> {
        let name = name.strip_suffix(".toml").unwrap_or(name);
        PRESETS.iter().find(|(n, _)| *n == name).map(|(n, src)| {
            let mut cfg = Self::from_toml(src)?;
            if cfg.name.is_empty() {
                cfg.name = n.to_string();
            }
            Ok(cfg)
        })
    }

    pub fn rect(&self) -> Result<BackgroundRect> {
        BackgroundRect::new(self.domain.lo, self.domain.hi)
    }

    pub fn phase_signs(&self) -> Vec<PhaseSign> {
        self.phases.iter().map(|p| p.sign).collect()
    }

    pub fn plane_wave_kappa(&self) -> Option<[f64; 2]> {
        match self.initial {
            InitialSpec::PlaneWave { kappa } => Some(kappa),
            _ => None,
        }
    }

    /// Boundary condition of each rectangle side (left, right, bottom, top).
    pub fn side_bcs(&self) -> Result<[BcSpec; 4]> {
        let b = &self.boundary;
        let pick = |s: &Option<BcSpec>, name: &str| {
            s.clone()
                .or_else(|| b.sides.clone())
                .ok_or_else(|| Error::Config(format!("no boundary condition for the {name} side")))
        };
        Ok([
            pick(&b.left, "left")?,
            pick(&b.right, "right")?,
            pick(&b.bottom, "bottom")?,
            pick(&b.top, "top")?,
        ])
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.domain;
        self.rect()?;
        if d.cells[0] == 0 || d.cells[1] == 0 {
            return Err(Error::Config("grid must have at least one cell per direction".into()));
        }
        if self.phases.is_empty() || self.phases.len() > 2 {
            return Err(Error::Config("one or two phases are required".into()));
        }
        if self.phases.len() == 2 && self.phases[0].sign == self.phases[1].sign {
            return Err(Error::Config("the two phases must have opposite signs".into()));
        }
        for p in &self.phases {
            p.build()?;
        }
        self.geometry.build()?;
        let disc = &self.discretization;
        if !(disc.fbar > 0.0 && disc.fbar < 1.0) {
            return Err(Error::Config(format!("fbar {} must lie in (0, 1)", disc.fbar)));
        }
        if !(disc.courant > 0.0 && disc.courant < 1.0) {
            return Err(Error::Config(format!("courant {} must lie in (0, 1)", disc.courant)));
        }
        let sides = self.side_bcs()?;
        for (axis, pair) in [(0, [0, 1]), (1, [2, 3])] {
            for s in pair {
                if (sides[s] == BcSpec::Periodic) != d.periodic[axis] {
                    return Err(Error::Config(format!(
                        "periodic boundary conditions must match domain.periodic along axis {}",
                        axis + 1
                    )));
                }
            }
        }
        if self.boundary.contour == Some(BcSpec::Periodic) {
            return Err(Error::Config("the zero contour cannot be periodic".into()));
        }
        let exact_bc = sides
            .iter()
            .chain(self.boundary.contour.iter())
            .any(|b| matches!(b, BcSpec::ExactVelocity | BcSpec::ExactTraction));
        match &self.initial {
            InitialSpec::PlaneWave { kappa } | InitialSpec::Pulse { kappa, .. }
                if kappa[0] == 0.0 && kappa[1] == 0.0 =>
            {
                return Err(Error::Config("kappa must be nonzero".into()));
            }
            InitialSpec::PlaneWave { .. } => {
                if self.phases.len() == 2 && self.phases[0].material != self.phases[1].material {
                    return Err(Error::Config(
                        "plane-wave initial data needs identical phase materials".into(),
                    ));
                }
            }
            InitialSpec::Pulse { sharpness, .. } if !(*sharpness > 0.0) => {
                return Err(Error::Config("pulse sharpness must be positive".into()));
            }
            _ if exact_bc => {
                return Err(Error::Config(
                    "exact boundary data needs a plane-wave initial condition".into(),
                ));
            }
            _ => {}
        }
        if let Some(t) = self.time.end {
            if !(t > 0.0) {
                return Err(Error::Config(format!("final time {t} must be positive")));
            }
        } else if self.plane_wave_kappa().is_none() {
            return Err(Error::Config(
                "time.end is required without a plane-wave initial condition".into(),
            ));
        }
        for s in &self.sources {
            if !self.phase_signs().contains(&s.phase) {
                return Err(Error::Config(format!("source phase {} is not meshed", s.phase)));
            }
            if s.ricker.fc <= 0.0 {
                return Err(Error::Config("Ricker frequency must be positive".into()));
            }
        }
        for r in &self.receivers {
            if !self.phase_signs().contains(&r.phase) {
                return Err(Error::Config(format!(
                    "receiver '{}' phase {} is not meshed",
                    r.name, r.phase
                )));
            }
            if r.name.is_empty()
                || !r
                    .name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
            {
                return Err(Error::Config(format!(
                    "receiver name '{}' must be alphanumeric",
                    r.name
                )));
            }
        }
        if self.output.log_every == 0 || self.output.receiver_every == 0 {
            return Err(Error::Config("output cadences must be at least one step".into()));
        }
        if let Some(a) = &self.amr {
            if a.ratio < 2 {
                return Err(Error::Config("refinement ratio must be at least 2".into()));
            }
            if a.regrid_every == 0 {
                return Err(Error::Config("regrid cadence must be at least one step".into()));
            }
        }
        Ok(())
    }
}
