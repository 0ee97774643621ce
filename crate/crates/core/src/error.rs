use std::path::PathBuf;

use thiserror::Error;

use crate::geometry::Point;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("level-set gradient vanishes at ({:.6e}, {:.6e})", .0[0], .0[1])]
    DegenerateGradient(Point),

    #[error("unsupported quadrature order {0} (expected 1..=20)")]
    UnsupportedOrder(usize),

    #[error("geometry unresolved on cell [{:.6e}, {:.6e}] x [{:.6e}, {:.6e}]: {reason}", lo[0], hi[0], lo[1], hi[1])]
    UnresolvedGeometry { lo: Point, hi: Point, reason: String },

    #[error("small cell ({i}, {j}) has no primary cell in its neighborhood; refine the grid")]
    NoMergeTarget { i: usize, j: usize },

    #[error("invalid material: {0}")]
    InvalidMaterial(String),

    #[error("plane-wave vector must be nonzero")]
    SingularWaveVector,

    #[error("interface impedance system is singular")]
    DegenerateImpedance,

    #[error("mass matrix of element {element} is not positive definite")]
    SingularMass { element: usize },

    #[error("source point ({:.6e}, {:.6e}) is not inside the solid", .0[0], .0[1])]
    SourceOutsideDomain(Point),

    #[error("non-finite state detected at t = {time:.6e} (step {step})")]
    NonFiniteState { step: usize, time: f64 },

    #[error("expression error: {0}")]
    Expression(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
