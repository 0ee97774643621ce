pub mod amr;
pub mod config;
pub mod dg;
pub mod driver;
mod error;
pub mod geometry;
pub mod mesh;
pub mod output;
pub mod physics;
pub mod quadrature;
pub mod riemann;
pub mod solver;
pub mod time;

pub use error::{Error, Result};
