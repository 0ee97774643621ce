//! Quadrature on full cells, on the part of a cell inside one phase of a
//! level set, on the zero contour, and on cut grid edges.
//!
//! Cut rules use a two-dimensional dimension reduction. A height direction
//! is chosen where the level set is monotone, the orthogonal base interval
//! is split at the contour's exits through the bottom and top faces, and
//! along each vertical line through a base Gauss node the roots of the level
//! set are located to machine precision. Every node lies inside the
//! integration domain and every weight is positive.

use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::geometry::{LevelSet, PhaseSign, Point};

/// Sign changes per line beyond which a cell counts as unresolved.
pub const MAX_ROOTS: usize = 4;
/// Largest supported 1D Gauss-Legendre rule.
pub const MAX_GAUSS_POINTS: usize = 20;

const LINE_INTERVALS: usize = 16;
const LATTICE: usize = 5;
const MAX_DEPTH: usize = 6;
const ROOT_TOL: f64 = 1e-14;

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gauss1d {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Gauss1d {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes and weights mapped onto `[a, b]`.
    pub fn mapped(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let mid = 0.5 * (a + b);
        let half = 0.5 * (b - a);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(&x, &w)| (mid + half * x, half * w))
    }
}

/// Returns the `n`-point Gauss-Legendre rule, `1 <= n <= 20`.
pub fn gauss_legendre_1d(n: usize) -> Result<&'static Gauss1d> {
    static TABLE: OnceLock<Vec<Gauss1d>> = OnceLock::new();
    if !(1..=MAX_GAUSS_POINTS).contains(&n) {
        return Err(Error::UnsupportedOrder(n));
    }
    let table = TABLE.get_or_init(|| (1..=MAX_GAUSS_POINTS).map(compute_gauss).collect());
    Ok(&table[n - 1])
}

fn legendre_and_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let nf = n as f64;
    let dp = nf * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

fn compute_gauss(n: usize) -> Gauss1d {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_and_derivative(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        if x.abs() < 1e-15 {
            x = 0.0;
        }
        let (_, dp) = legendre_and_derivative(n, x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    Gauss1d { nodes, weights }
}

/// A set of weighted points, optionally with unit normals (surface rules).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct QuadRule {
    pub nodes: Vec<Point>,
    pub weights: Vec<f64>,
    pub normals: Option<Vec<[f64; 2]>>,
}

impl QuadRule {
    pub fn surface() -> Self {
        QuadRule {
            nodes: Vec::new(),
            weights: Vec::new(),
            normals: Some(Vec::new()),
        }
    }

    /// The `q x q` tensor Gauss-Legendre rule on a box.
    pub fn tensor(lo: Point, hi: Point, q: usize) -> Result<Self> {
        let g = gauss_legendre_1d(q)?;
        let mut rule = QuadRule::default();
        push_tensor(&mut rule, lo, hi, g);
        Ok(rule)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Sum of the weights: the measure of the integration domain.
    pub fn measure(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn integrate(&self, f: impl Fn(Point) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }

    pub fn push(&mut self, x: Point, w: f64) {
        self.nodes.push(x);
        self.weights.push(w);
    }

    pub fn push_with_normal(&mut self, x: Point, w: f64, n: [f64; 2]) {
        self.nodes.push(x);
        self.weights.push(w);
        self.normals.get_or_insert_with(Vec::new).push(n);
    }

    pub fn append(&mut self, other: &QuadRule) {
        self.nodes.extend_from_slice(&other.nodes);
        self.weights.extend_from_slice(&other.weights);
        if let Some(n) = &other.normals {
            self.normals.get_or_insert_with(Vec::new).extend_from_slice(n);
        }
    }

    /// Translates every node by `shift`.
    pub fn shifted(&self, shift: [f64; 2]) -> QuadRule {
        let mut out = self.clone();
        for x in &mut out.nodes {
            x[0] += shift[0];
            x[1] += shift[1];
        }
        out
    }

    /// Flips the normals (the same rule seen from the other side).
    pub fn flipped(&self) -> QuadRule {
        let mut out = self.clone();
        if let Some(ns) = &mut out.normals {
            for n in ns {
                n[0] = -n[0];
                n[1] = -n[1];
            }
        }
        out
    }
}

fn push_tensor(rule: &mut QuadRule, lo: Point, hi: Point, g: &Gauss1d) {
    for (y, wy) in g.mapped(lo[1], hi[1]) {
        for (x, wx) in g.mapped(lo[0], hi[0]) {
            rule.push([x, y], wx * wy);
        }
    }
}

/// A grid cell identified by its index pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub index: [usize; 2],
    pub lo: Point,
    pub hi: Point,
}

impl Cell {
    pub fn new(index: [usize; 2], lo: Point, hi: Point) -> Self {
        Cell { index, lo, hi }
    }

    pub fn size(&self) -> [f64; 2] {
        [self.hi[0] - self.lo[0], self.hi[1] - self.lo[1]]
    }

    pub fn area(&self) -> f64 {
        let h = self.size();
        h[0] * h[1]
    }

    pub fn center(&self) -> Point {
        [0.5 * (self.lo[0] + self.hi[0]), 0.5 * (self.lo[1] + self.hi[1])]
    }
}

/// An axis-aligned segment `start + t e_axis`, `t` in `[0, length]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub start: Point,
    pub axis: usize,
    pub length: f64,
}

impl Segment {
    pub fn point(&self, t: f64) -> Point {
        let mut p = self.start;
        p[self.axis] += t;
        p
    }

    pub fn end(&self) -> Point {
        self.point(self.length)
    }
}

/// Quadrature for `cell ∩ phase`.
pub fn cut_volume_rule(cell: &Cell, ls: &LevelSet, phase: PhaseSign, q: usize) -> Result<QuadRule> {
    let g = gauss_legendre_1d(q)?;
    let mut rule = QuadRule::default();
    let ctx = Ctx {
        ls,
        sign: phase.factor(),
        gauss: g,
        cell,
        surface: false,
    };
    ctx.build(cell.lo, cell.hi, 0, &mut rule)?;
    Ok(rule)
}

/// Quadrature for the zero contour inside `cell`, with normals `∇φ/|∇φ|`.
pub fn cut_surface_rule(cell: &Cell, ls: &LevelSet, q: usize) -> Result<QuadRule> {
    let g = gauss_legendre_1d(q)?;
    let mut rule = QuadRule::surface();
    let ctx = Ctx {
        ls,
        sign: 1.0,
        gauss: g,
        cell,
        surface: true,
    };
    ctx.build(cell.lo, cell.hi, 0, &mut rule)?;
    Ok(rule)
}

/// Quadrature for the part of an axis-aligned segment inside `phase`.
pub fn cut_face_rule(face: &Segment, ls: &LevelSet, phase: PhaseSign, q: usize) -> Result<QuadRule> {
    let g = gauss_legendre_1d(q)?;
    let s = phase.factor();
    let psi = |t: f64| s * ls.value(face.point(t));
    let dpsi = |t: f64| s * ls.gradient(face.point(t))[face.axis];
    let mut roots = Vec::new();
    line_roots(&psi, &dpsi, 0.0, face.length, &mut roots).map_err(|reason| {
        let end = face.end();
        Error::UnresolvedGeometry {
            lo: face.start,
            hi: end,
            reason,
        }
    })?;
    let mut rule = QuadRule::default();
    let tol = ROOT_TOL * face.length;
    let mut a = 0.0;
    for &b in roots.iter().chain(std::iter::once(&face.length)) {
        if b - a > tol && psi(0.5 * (a + b)) < 0.0 {
            for (t, w) in g.mapped(a, b) {
                rule.push(face.point(t), w);
            }
        }
        a = b;
    }
    Ok(rule)
}

/// Finds the sign changes of `f` on `[a, b]` (zero counts as positive).
///
/// Brackets are located by uniform sampling, narrowed by bisection to
/// `1e-14 (b - a)` and polished by one Newton step.
fn line_roots(
    f: &impl Fn(f64) -> f64,
    df: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    roots: &mut Vec<f64>,
) -> std::result::Result<(), String> {
    roots.clear();
    let len = b - a;
    let tol = ROOT_TOL * len;
    let dt = len / LINE_INTERVALS as f64;
    let mut t0 = a;
    let mut n0 = f(a) < 0.0;
    for i in 1..=LINE_INTERVALS {
        let t1 = if i == LINE_INTERVALS { b } else { a + dt * i as f64 };
        let n1 = f(t1) < 0.0;
        if n1 != n0 {
            if roots.len() == MAX_ROOTS {
                return Err(format!("more than {MAX_ROOTS} sign changes along a line"));
            }
            let (mut lo, mut hi) = (t0, t1);
            while hi - lo > tol {
                let mid = 0.5 * (lo + hi);
                // tol can fall below the float spacing on small boxes
                if mid <= lo || mid >= hi {
                    break;
                }
                if (f(mid) < 0.0) == n0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let mut r = 0.5 * (lo + hi);
            let d = df(r);
            if d != 0.0 {
                let step = f(r) / d;
                if step.abs() <= tol {
                    r -= step;
                }
            }
            roots.push(r.clamp(t0, t1));
        }
        t0 = t1;
        n0 = n1;
    }
    Ok(())
}

enum Scan {
    Inside,
    Outside,
    Cut { height: usize, monotone: bool },
}

struct Ctx<'a> {
    ls: &'a LevelSet,
    sign: f64,
    gauss: &'a Gauss1d,
    cell: &'a Cell,
    surface: bool,
}

impl Ctx<'_> {
    fn psi(&self, x: Point) -> f64 {
        self.sign * self.ls.value(x)
    }

    fn unresolved(&self, reason: String) -> Error {
        Error::UnresolvedGeometry {
            lo: self.cell.lo,
            hi: self.cell.hi,
            reason,
        }
    }

    fn build(&self, lo: Point, hi: Point, depth: usize, rule: &mut QuadRule) -> Result<()> {
        match self.scan(lo, hi) {
            Scan::Inside => {
                if !self.surface {
                    push_tensor(rule, lo, hi, self.gauss);
                }
                Ok(())
            }
            Scan::Outside => Ok(()),
            Scan::Cut { monotone: false, .. } if depth < MAX_DEPTH => {
                let mid = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];
                for (l, h) in [
                    (lo, mid),
                    ([mid[0], lo[1]], [hi[0], mid[1]]),
                    ([lo[0], mid[1]], [mid[0], hi[1]]),
                    (mid, hi),
                ] {
                    self.build(l, h, depth + 1, rule)?;
                }
                Ok(())
            }
            Scan::Cut { height, .. } => self.reduce(lo, hi, height, rule),
        }
    }

    /// Samples the box on a lattice. A box counts as uncut when every
    /// sample keeps its sign under a linear extrapolation over its patch.
    fn scan(&self, lo: Point, hi: Point) -> Scan {
        let d = [
            (hi[0] - lo[0]) / (LATTICE - 1) as f64,
            (hi[1] - lo[1]) / (LATTICE - 1) as f64,
        ];
        let reach = 0.75 * d[0].hypot(d[1]);
        let mut all_in = true;
        let mut all_out = true;
        let mut samples = [(0.0, [0.0; 2]); LATTICE * LATTICE];
        for j in 0..LATTICE {
            for i in 0..LATTICE {
                let x = [lo[0] + d[0] * i as f64, lo[1] + d[1] * j as f64];
                let v = self.psi(x);
                let g = self.ls.gradient(x);
                let g = [self.sign * g[0], self.sign * g[1]];
                let margin = g[0].hypot(g[1]) * reach;
                all_in &= v < -margin;
                all_out &= v > margin;
                samples[j * LATTICE + i] = (v, g);
            }
        }
        if all_in {
            return Scan::Inside;
        }
        if all_out {
            return Scan::Outside;
        }
        let near = |&&(v, g): &&(f64, [f64; 2])| v.abs() <= 2.0 * g[0].hypot(g[1]) * reach;
        let mut weight = [0.0; 2];
        for (_, g) in samples.iter().filter(near) {
            weight[0] += g[0].abs();
            weight[1] += g[1].abs();
        }
        let height = if weight[0] > weight[1] { 0 } else { 1 };
        let mut pos = false;
        let mut neg = false;
        let mut flat = false;
        for (_, g) in samples.iter().filter(near) {
            let gk = g[height];
            pos |= gk > 0.0;
            neg |= gk < 0.0;
            flat |= gk.abs() <= 1e-12 * g[0].hypot(g[1]);
        }
        Scan::Cut {
            height,
            monotone: !(pos && neg) && !flat,
        }
    }

    fn reduce(&self, lo: Point, hi: Point, k: usize, rule: &mut QuadRule) -> Result<()> {
        let b = 1 - k;
        let at = |xb: f64, t: f64| {
            let mut p = [0.0; 2];
            p[b] = xb;
            p[k] = t;
            p
        };
        let mut breaks = vec![lo[b], hi[b]];
        let mut roots = Vec::new();
        for tk in [lo[k], hi[k]] {
            let f = |s: f64| self.psi(at(s, tk));
            let df = |s: f64| self.sign * self.ls.gradient(at(s, tk))[b];
            line_roots(&f, &df, lo[b], hi[b], &mut roots).map_err(|r| self.unresolved(r))?;
            breaks.extend_from_slice(&roots);
        }
        breaks.sort_by(f64::total_cmp);
        let tol_b = ROOT_TOL * (hi[b] - lo[b]);
        let tol_k = ROOT_TOL * (hi[k] - lo[k]);

        for w in breaks.windows(2) {
            let (a, c) = (w[0], w[1]);
            if c - a <= tol_b {
                continue;
            }
            for (xb, wb) in self.gauss.mapped(a, c) {
                let f = |t: f64| self.psi(at(xb, t));
                let df = |t: f64| self.sign * self.ls.gradient(at(xb, t))[k];
                line_roots(&f, &df, lo[k], hi[k], &mut roots).map_err(|r| self.unresolved(r))?;
                if self.surface {
                    for &t in &roots {
                        let x = at(xb, t);
                        let g = self.ls.gradient(x);
                        let norm = g[0].hypot(g[1]);
                        if g[k] == 0.0 || norm == 0.0 {
                            continue;
                        }
                        rule.push_with_normal(x, wb * norm / g[k].abs(), [g[0] / norm, g[1] / norm]);
                    }
                } else {
                    let mut t0 = lo[k];
                    for &t1 in roots.iter().chain(std::iter::once(&hi[k])) {
                        if t1 - t0 > tol_k && f(0.5 * (t0 + t1)) < 0.0 {
                            for (t, wt) in self.gauss.mapped(t0, t1) {
                                rule.push(at(xb, t), wb * wt);
                            }
                        }
                        t0 = t1;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Relative errors of the summed cut rules for a circle's area and
/// circumference on an `n × n` grid of the unit square.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct CircleQuadratureRow {
    pub cells: usize,
    pub area: f64,
    pub length: f64,
    pub area_error: f64,
    pub length_error: f64,
}

/// Sums `cut_volume_rule` and `cut_surface_rule` of order `q` over every
/// cell for the circle of `radius` centred in the unit square.
pub fn circle_quadrature_study(radius: f64, grids: &[usize], q: usize) -> Result<Vec<CircleQuadratureRow>> {
    let ls = LevelSet::circle([0.5, 0.5], radius);
    let exact_area = PI * radius * radius;
    let exact_length = 2.0 * PI * radius;
    grids
        .iter()
        .map(|&n| {
            let h = 1.0 / n as f64;
            let (mut area, mut length) = (0.0, 0.0);
            for j in 0..n {
                for i in 0..n {
                    let cell = Cell::new(
                        [i, j],
                        [i as f64 * h, j as f64 * h],
                        [(i + 1) as f64 * h, (j + 1) as f64 * h],
                    );
                    area += cut_volume_rule(&cell, &ls, PhaseSign::Positive, q)?.measure();
                    length += cut_surface_rule(&cell, &ls, q)?.measure();
                }
            }
            Ok(CircleQuadratureRow {
                cells: n,
                area,
                length,
                area_error: ((area - exact_area) / exact_area).abs(),
                length_error: ((length - exact_length) / exact_length).abs(),
            })
        })
        .collect()
}
