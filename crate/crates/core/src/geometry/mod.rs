//! Level-set geometry: the background rectangle, phase labels, and the
//! scalar fields whose zero contour carves the solid out of the rectangle.
//!
//! Phase α is the region where the level set is negative, phase β the region
//! where it is positive. Built-in families carry analytic gradients; anything
//! else falls back to central differences.

mod expr;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use expr::Expr;

pub type Point = [f64; 2];

/// Gradients below this magnitude are treated as degenerate.
pub const GRADIENT_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundRect {
    pub lo: Point,
    pub hi: Point,
}

impl BackgroundRect {
    pub fn new(lo: Point, hi: Point) -> Result<Self> {
        if !(lo[0] < hi[0] && lo[1] < hi[1]) {
            return Err(Error::Config(format!(
                "background rectangle needs lo < hi, got {lo:?} / {hi:?}"
            )));
        }
        Ok(BackgroundRect { lo, hi })
    }

    pub fn unit() -> Self {
        BackgroundRect {
            lo: [0.0, 0.0],
            hi: [1.0, 1.0],
        }
    }

    pub fn extent(&self) -> [f64; 2] {
        [self.hi[0] - self.lo[0], self.hi[1] - self.lo[1]]
    }

    pub fn area(&self) -> f64 {
        let e = self.extent();
        e[0] * e[1]
    }

    pub fn diagonal(&self) -> f64 {
        let e = self.extent();
        e[0].hypot(e[1])
    }

    pub fn contains(&self, x: Point) -> bool {
        (0..2).all(|i| x[i] >= self.lo[i] && x[i] <= self.hi[i])
    }
}

/// Which sign region of the level set a quantity refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseSign {
    /// φ < 0 (phase α).
    Negative,
    /// φ > 0 (phase β).
    Positive,
}

impl PhaseSign {
    /// Factor `s` such that the phase is `{ s·φ < 0 }`.
    #[inline]
    pub fn factor(self) -> f64 {
        match self {
            PhaseSign::Negative => 1.0,
            PhaseSign::Positive => -1.0,
        }
    }

    pub fn opposite(self) -> PhaseSign {
        match self {
            PhaseSign::Negative => PhaseSign::Positive,
            PhaseSign::Positive => PhaseSign::Negative,
        }
    }

    /// Whether a level-set value lies inside this phase.
    #[inline]
    pub fn contains(self, phi: f64) -> bool {
        self.factor() * phi < 0.0
    }
}

impl fmt::Display for PhaseSign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PhaseSign::Negative => f.write_str("alpha"),
            PhaseSign::Positive => f.write_str("beta"),
        }
    }
}

/// A scalar field over the plane. Implementors may provide an analytic
/// gradient; otherwise [`LevelSet`] differentiates numerically.
pub trait LevelSetFn: Send + Sync + fmt::Debug {
    fn value(&self, x: Point) -> f64;

    fn gradient(&self, _x: Point) -> Option<[f64; 2]> {
        None
    }
}

/// Shared, immutable handle to a level-set function.
#[derive(Clone, Debug)]
pub struct LevelSet {
    f: Arc<dyn LevelSetFn>,
    fd_step: f64,
}

impl LevelSet {
    pub fn new(f: impl LevelSetFn + 'static) -> Self {
        LevelSet {
            f: Arc::new(f),
            fd_step: 1e-6,
        }
    }

    /// Sets the finite-difference step to 1e-6 times the rectangle diagonal.
    pub fn scaled_to(mut self, rect: &BackgroundRect) -> Self {
        self.fd_step = 1e-6 * rect.diagonal();
        self
    }

    pub fn fd_step(&self) -> f64 {
        self.fd_step
    }

    #[inline]
    pub fn value(&self, x: Point) -> f64 {
        self.f.value(x)
    }

    pub fn gradient(&self, x: Point) -> [f64; 2] {
        if let Some(g) = self.f.gradient(x) {
            return g;
        }
        self.fd_gradient(x)
    }

    pub fn fd_gradient(&self, x: Point) -> [f64; 2] {
        let h = self.fd_step;
        let dx = (self.value([x[0] + h, x[1]]) - self.value([x[0] - h, x[1]])) / (2.0 * h);
        let dy = (self.value([x[0], x[1] + h]) - self.value([x[0], x[1] - h])) / (2.0 * h);
        [dx, dy]
    }

    pub fn has_analytic_gradient(&self) -> bool {
        self.f.gradient([0.0, 0.0]).is_some()
    }

    /// `R² − |x − o|²`: positive inside the disc.
    pub fn circle(center: Point, radius: f64) -> Self {
        LevelSet::new(Circle { center, radius })
    }

    /// `a·x + b`.
    pub fn plane(coeffs: [f64; 2], offset: f64) -> Self {
        LevelSet::new(Plane { coeffs, offset })
    }

    /// `amplitude·cos(2πk x₁)·cos(2πk x₂) + shift`.
    pub fn trig_product(amplitude: f64, wavenumber: f64, shift: f64) -> Self {
        LevelSet::new(TrigProduct {
            amplitude,
            wavenumber,
            shift,
        })
    }

    pub fn constant(value: f64) -> Self {
        LevelSet::new(Constant(value))
    }

    pub fn expression(source: &str) -> Result<Self> {
        Ok(LevelSet::new(ExprLevelSet(Expr::parse(source)?)))
    }

    /// `1 − Σ_k max(0, 1 − φ_k/δ₁)^δ₂`.
    pub fn blend(parts: Vec<LevelSet>, delta1: f64, delta2: f64) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::Config("blend needs at least one level set".into()));
        }
        if !(delta1 > 0.0 && delta2 > 0.0) {
            return Err(Error::Config(format!(
                "blend parameters must be positive, got δ1={delta1}, δ2={delta2}"
            )));
        }
        Ok(LevelSet::new(Blend { parts, delta1, delta2 }))
    }

    pub fn negated(self) -> Self {
        let fd_step = self.fd_step;
        let mut n = LevelSet::new(Negated(self));
        n.fd_step = fd_step;
        n
    }
}

/// Evaluates the level set at `x`.
pub fn eval_levelset(ls: &LevelSet, x: Point) -> f64 {
    ls.value(x)
}

/// Unit normal of the zero contour pointing out of `phase`.
///
/// For phase α (φ < 0) the outward direction is `+∇φ/|∇φ|`.
pub fn boundary_normal(ls: &LevelSet, x: Point, phase: PhaseSign) -> Result<[f64; 2]> {
    let g = ls.gradient(x);
    let norm = g[0].hypot(g[1]);
    if !(norm > GRADIENT_EPS) {
        return Err(Error::DegenerateGradient(x));
    }
    let s = phase.factor() / norm;
    Ok([g[0] * s, g[1] * s])
}

#[derive(Debug)]
struct Circle {
    center: Point,
    radius: f64,
}

impl LevelSetFn for Circle {
    fn value(&self, x: Point) -> f64 {
        let dx = x[0] - self.center[0];
        let dy = x[1] - self.center[1];
        self.radius * self.radius - dx * dx - dy * dy
    }

    fn gradient(&self, x: Point) -> Option<[f64; 2]> {
        Some([-2.0 * (x[0] - self.center[0]), -2.0 * (x[1] - self.center[1])])
    }
}

#[derive(Debug)]
struct Plane {
    coeffs: [f64; 2],
    offset: f64,
}

impl LevelSetFn for Plane {
    fn value(&self, x: Point) -> f64 {
        self.coeffs[0] * x[0] + self.coeffs[1] * x[1] + self.offset
    }

    fn gradient(&self, _x: Point) -> Option<[f64; 2]> {
        Some(self.coeffs)
    }
}

#[derive(Debug)]
struct TrigProduct {
    amplitude: f64,
    wavenumber: f64,
    shift: f64,
}

impl LevelSetFn for TrigProduct {
    fn value(&self, x: Point) -> f64 {
        let w = 2.0 * std::f64::consts::PI * self.wavenumber;
        self.amplitude * (w * x[0]).cos() * (w * x[1]).cos() + self.shift
    }

    fn gradient(&self, x: Point) -> Option<[f64; 2]> {
        let w = 2.0 * std::f64::consts::PI * self.wavenumber;
        let (s0, c0) = (w * x[0]).sin_cos();
        let (s1, c1) = (w * x[1]).sin_cos();
        Some([-self.amplitude * w * s0 * c1, -self.amplitude * w * c0 * s1])
    }
}

#[derive(Debug)]
struct Constant(f64);

impl LevelSetFn for Constant {
    fn value(&self, _x: Point) -> f64 {
        self.0
    }

    fn gradient(&self, _x: Point) -> Option<[f64; 2]> {
        Some([0.0, 0.0])
    }
}

#[derive(Debug)]
struct ExprLevelSet(Expr);

impl LevelSetFn for ExprLevelSet {
    fn value(&self, x: Point) -> f64 {
        self.0.eval(x)
    }

    fn gradient(&self, x: Point) -> Option<[f64; 2]> {
        Some(self.0.eval_dual(x).d)
    }
}

#[derive(Debug)]
struct Negated(LevelSet);

impl LevelSetFn for Negated {
    fn value(&self, x: Point) -> f64 {
        -self.0.value(x)
    }

    fn gradient(&self, x: Point) -> Option<[f64; 2]> {
        let g = self.0.gradient(x);
        Some([-g[0], -g[1]])
    }
}

#[derive(Debug)]
struct Blend {
    parts: Vec<LevelSet>,
    delta1: f64,
    delta2: f64,
}

impl LevelSetFn for Blend {
    fn value(&self, x: Point) -> f64 {
        1.0 - self
            .parts
            .iter()
            .map(|p| (1.0 - p.value(x) / self.delta1).max(0.0).powf(self.delta2))
            .sum::<f64>()
    }

    fn gradient(&self, x: Point) -> Option<[f64; 2]> {
        let mut g = [0.0; 2];
        for p in &self.parts {
            let base = 1.0 - p.value(x) / self.delta1;
            if base <= 0.0 {
                continue;
            }
            let s = self.delta2 * base.powf(self.delta2 - 1.0) / self.delta1;
            let gp = p.gradient(x);
            g[0] += s * gp[0];
            g[1] += s * gp[1];
        }
        Some(g)
    }
}

/// The structured-solid lattice: two families of struts of half-width `w`
/// along the diagonals, blended with homogeneous ends outside `[l, 2l]`.
pub fn structured_lattice(l: f64, w: f64, delta1: f64, delta2: f64) -> Result<LevelSet> {
    let strut_a = LevelSet::expression(&format!("abs(sin(pi*(x1 - x2 - 0.5))) - {w}"))?;
    let strut_b = LevelSet::expression(&format!("abs(sin(pi*(x1 + x2 - 0.5))) - {w}"))?;
    let ends = LevelSet::expression(&format!("({l} - x1)*(x1 - 2*{l})"))?;
    LevelSet::blend(vec![strut_a, strut_b, ends], delta1, delta2)
}
