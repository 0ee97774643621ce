//! Discontinuous Galerkin discretization on implicitly defined meshes.
//!
//! Each element carries `NU` fields expanded in a tensor-product Legendre
//! basis that is orthonormal on the element's primary cell. Coefficients are
//! stored component-major: all `N_p` coefficients of `m₁`, then `m₂`, and so on.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::geometry::{LevelSet, PhaseSign, Point};
use crate::mesh::{Element, FaceKind, ImplicitMesh, Side};
use crate::physics::{Material, State, NU, NV};
use crate::riemann::{upwind_matrices, BoundarySolver, InterfaceSolver};
use crate::{Error, Result};

/// Stiffness and volume basis tables shared by all regular elements.
type SharedTables = (Arc<[Vec<f64>; 2]>, Arc<Vec<f64>>);

/// Tensor-product Legendre basis of degree `p`, orthonormal on a box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Basis {
    pub degree: usize,
    pub lo: Point,
    pub size: [f64; 2],
}

/// Values `P_0..=P_p` and derivatives of the Legendre polynomials at `xi`.
fn legendre(p: usize, xi: f64, val: &mut [f64], der: &mut [f64]) {
    val[0] = 1.0;
    der[0] = 0.0;
    if p == 0 {
        return;
    }
    val[1] = xi;
    der[1] = 1.0;
    for n in 1..p {
        let nf = n as f64;
        val[n + 1] = ((2.0 * nf + 1.0) * xi * val[n] - nf * val[n - 1]) / (nf + 1.0);
        der[n + 1] = der[n - 1] + (2.0 * nf + 1.0) * val[n];
    }
}

/// Largest supported degree.
pub const MAX_DEGREE: usize = 9;

impl Basis {
    pub fn new(degree: usize, lo: Point, hi: Point) -> Result<Self> {
        if degree > MAX_DEGREE {
            return Err(Error::Config(format!(
                "polynomial degree {degree} exceeds {MAX_DEGREE}"
            )));
        }
        Ok(Basis {
            degree,
            lo,
            size: [hi[0] - lo[0], hi[1] - lo[1]],
        })
    }

    /// Basis on the primary cell of `element`.
    pub fn of(element: &Element, degree: usize) -> Result<Self> {
        Basis::new(degree, element.lo, element.hi)
    }

    pub fn len(&self) -> usize {
        (self.degree + 1) * (self.degree + 1)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn axis(&self, x: Point, axis: usize, val: &mut [f64], der: &mut [f64]) {
        let h = self.size[axis];
        let xi = 2.0 * (x[axis] - self.lo[axis]) / h - 1.0;
        legendre(self.degree, xi, val, der);
        for a in 0..=self.degree {
            let s = ((2 * a + 1) as f64 / h).sqrt();
            val[a] *= s;
            der[a] *= s * 2.0 / h;
        }
    }

    /// Values at `x`; `out[j (p+1) + i] = φ_i(x₁) φ_j(x₂)`.
    pub fn eval(&self, x: Point, out: &mut [f64]) {
        let n = self.degree + 1;
        let mut vx = [0.0; MAX_DEGREE + 1];
        let mut vy = [0.0; MAX_DEGREE + 1];
        let mut d = [0.0; MAX_DEGREE + 1];
        self.axis(x, 0, &mut vx, &mut d);
        self.axis(x, 1, &mut vy, &mut d);
        for j in 0..n {
            for i in 0..n {
                out[j * n + i] = vx[i] * vy[j];
            }
        }
    }

    /// Values and gradients at `x`.
    pub fn eval_grad(&self, x: Point, val: &mut [f64], grad: &mut [[f64; 2]]) {
        let n = self.degree + 1;
        let (mut vx, mut dx) = ([0.0; MAX_DEGREE + 1], [0.0; MAX_DEGREE + 1]);
        let (mut vy, mut dy) = ([0.0; MAX_DEGREE + 1], [0.0; MAX_DEGREE + 1]);
        self.axis(x, 0, &mut vx, &mut dx);
        self.axis(x, 1, &mut vy, &mut dy);
        for j in 0..n {
            for i in 0..n {
                val[j * n + i] = vx[i] * vy[j];
                grad[j * n + i] = [dx[i] * vy[j], vx[i] * dy[j]];
            }
        }
    }

    pub fn values(&self, x: Point) -> Vec<f64> {
        let mut v = vec![0.0; self.len()];
        self.eval(x, &mut v);
        v
    }
}

/// `basis_eval`: values and gradients as vectors.
pub fn basis_eval(basis: &Basis, x: Point) -> (Vec<f64>, Vec<[f64; 2]>) {
    let mut v = vec![0.0; basis.len()];
    let mut g = vec![[0.0; 2]; basis.len()];
    basis.eval_grad(x, &mut v, &mut g);
    (v, g)
}

/// Element mass matrix `∫ 𝔹ᵀ𝔹 dV`, kept as the Cholesky factor of one
/// component block. `None` marks the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct MassMatrix {
    np: usize,
    full: Option<Vec<f64>>,
    factor: Option<Vec<f64>>,
}

impl MassMatrix {
    pub fn identity(np: usize) -> Self {
        MassMatrix {
            np,
            full: None,
            factor: None,
        }
    }

    /// Factors a dense symmetric block given row-major.
    pub fn from_dense(np: usize, m: Vec<f64>, element: usize) -> Result<Self> {
        let chol = DMatrix::from_row_slice(np, np, &m)
            .cholesky()
            .ok_or(Error::SingularMass { element })?;
        let l = chol.l();
        let mut factor = vec![0.0; np * np];
        for r in 0..np {
            for c in 0..=r {
                factor[r * np + c] = l[(r, c)];
            }
        }
        if factor.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularMass { element });
        }
        Ok(MassMatrix {
            np,
            full: Some(m),
            factor: Some(factor),
        })
    }

    pub fn is_identity(&self) -> bool {
        self.factor.is_none()
    }

    pub fn size(&self) -> usize {
        self.np
    }

    /// Entry `(r, c)` of one component block.
    pub fn entry(&self, r: usize, c: usize) -> f64 {
        match &self.full {
            Some(m) => m[r * self.np + c],
            None => f64::from(u8::from(r == c)),
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.np).map(|k| self.entry(k, k)).sum()
    }

    /// Solves `M y = x` in place for one component block.
    pub fn solve_block(&self, x: &mut [f64]) {
        let Some(l) = &self.factor else { return };
        let n = self.np;
        for r in 0..n {
            let mut s = x[r];
            for c in 0..r {
                s -= l[r * n + c] * x[c];
            }
            x[r] = s / l[r * n + r];
        }
        for r in (0..n).rev() {
            let mut s = x[r];
            for c in r + 1..n {
                s -= l[c * n + r] * x[c];
            }
            x[r] = s / l[r * n + r];
        }
    }

    /// Applies `M⁻¹` to every component block of an element vector.
    pub fn solve(&self, x: &mut [f64]) {
        if self.factor.is_some() {
            for block in x.chunks_mut(self.np) {
                self.solve_block(block);
            }
        }
    }

    /// `y = M x` for every component block.
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        match &self.full {
            None => y.copy_from_slice(x),
            Some(m) => {
                let n = self.np;
                for (xb, yb) in x.chunks(n).zip(y.chunks_mut(n)) {
                    for r in 0..n {
                        yb[r] = (0..n).map(|c| m[r * n + c] * xb[c]).sum();
                    }
                }
            }
        }
    }
}

/// Mass matrix of `element` from its stored volume quadrature.
pub fn mass_matrix(element: &Element, basis: &Basis, index: usize) -> Result<MassMatrix> {
    let np = basis.len();
    let mut m = vec![0.0; np * np];
    let mut v = vec![0.0; np];
    for (x, w) in element.quad.nodes.iter().zip(&element.quad.weights) {
        basis.eval(*x, &mut v);
        for r in 0..np {
            let wr = w * v[r];
            for c in 0..=r {
                m[r * np + c] += wr * v[c];
            }
        }
    }
    for r in 0..np {
        for c in r + 1..np {
            m[r * np + c] = m[c * np + r];
        }
    }
    MassMatrix::from_dense(np, m, index)
}

/// Coefficients of all elements of one mesh, element-major.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Solution {
    pub np: usize,
    pub data: Vec<f64>,
}

impl Solution {
    pub fn zeros(elements: usize, np: usize) -> Self {
        Solution {
            np,
            data: vec![0.0; elements * NU * np],
        }
    }

    pub fn stride(&self) -> usize {
        NU * self.np
    }

    pub fn num_elements(&self) -> usize {
        self.data.len() / self.stride()
    }

    pub fn element(&self, e: usize) -> &[f64] {
        let s = self.stride();
        &self.data[e * s..(e + 1) * s]
    }

    pub fn element_mut(&mut self, e: usize) -> &mut [f64] {
        let s = self.stride();
        &mut self.data[e * s..(e + 1) * s]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Partial sums behind the two error measures.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ErrorParts {
    pub max_error: f64,
    pub max_exact: f64,
    pub error_energy: f64,
    pub exact_energy: f64,
}

impl ErrorParts {
    pub fn merge(self, o: ErrorParts) -> ErrorParts {
        ErrorParts {
            max_error: self.max_error.max(o.max_error),
            max_exact: self.max_exact.max(o.max_exact),
            error_energy: self.error_energy + o.error_energy,
            exact_energy: self.exact_energy + o.exact_energy,
        }
    }

    /// `(e_L∞, e_L2)`, both relative to the exact solution.
    pub fn measures(&self) -> (f64, f64) {
        (
            self.max_error / self.max_exact,
            (self.error_energy / self.exact_energy).sqrt(),
        )
    }
}

/// Boundary data callbacks receive `(t, x)`; traction data also the outward normal.
pub type VelocityData = Arc<dyn Fn(f64, Point) -> [f64; 2] + Send + Sync>;
pub type TractionData = Arc<dyn Fn(f64, Point, [f64; 2]) -> [f64; 2] + Send + Sync>;

#[derive(Clone)]
pub enum BoundaryCondition {
    Velocity(VelocityData),
    Traction(TractionData),
    Absorbing,
    /// Only valid on sides whose axis is periodic in the mesh.
    Periodic,
}

impl BoundaryCondition {
    pub fn free_surface() -> Self {
        BoundaryCondition::Traction(Arc::new(|_, _, _| [0.0; 2]))
    }

    pub fn fixed() -> Self {
        BoundaryCondition::Velocity(Arc::new(|_, _| [0.0; 2]))
    }

    pub fn name(&self) -> &'static str {
        match self {
            BoundaryCondition::Velocity(_) => "velocity",
            BoundaryCondition::Traction(_) => "traction",
            BoundaryCondition::Absorbing => "absorbing",
            BoundaryCondition::Periodic => "periodic",
        }
    }
}

impl std::fmt::Debug for BoundaryCondition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Boundary conditions for the four sides of the rectangle and the zero contour.
#[derive(Clone, Debug)]
pub struct BcTable {
    /// Left, right, bottom, top.
    pub sides: [BoundaryCondition; 4],
    pub contour: BoundaryCondition,
}

impl BcTable {
    pub fn uniform(bc: BoundaryCondition) -> Self {
        BcTable {
            sides: [bc.clone(), bc.clone(), bc.clone(), bc.clone()],
            contour: bc,
        }
    }

    pub fn periodic() -> Self {
        BcTable {
            sides: [
                BoundaryCondition::Periodic,
                BoundaryCondition::Periodic,
                BoundaryCondition::Periodic,
                BoundaryCondition::Periodic,
            ],
            contour: BoundaryCondition::free_surface(),
        }
    }

    pub fn side(&self, side: Side) -> &BoundaryCondition {
        &self.sides[side as usize]
    }
}

/// Ricker wavelet `a₁ (½ + a₂ (t − t₀)²) e^{a₂ (t − t₀)²}`, `a₂ = −π² f_c²`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ricker {
    pub a1: f64,
    pub fc: f64,
    pub t0: f64,
}

impl Ricker {
    pub fn eval(&self, t: f64) -> f64 {
        ricker(t, self.a1, self.fc, self.t0)
    }
}

pub fn ricker(t: f64, a1: f64, fc: f64, t0: f64) -> f64 {
    let a2 = -PI * PI * fc * fc;
    let s = a2 * (t - t0) * (t - t0);
    a1 * (0.5 + s) * s.exp()
}

/// A concentrated force `R_w(t) δ(x − s) û` located in one element.
#[derive(Clone, Debug)]
pub struct PointSource {
    pub element: usize,
    pub position: Point,
    pub direction: [f64; 2],
    pub wavelet: Ricker,
    values: Vec<f64>,
}

impl PointSource {
    pub fn basis_values(&self) -> &[f64] {
        &self.values
    }
}

// Linear flux maps at one face point: F̂ = A⁻ u⁻ + A⁺ u⁺ + D g, where g is
// prescribed boundary data (velocity or traction).
#[derive(Clone, Copy, Debug)]
struct FluxMap {
    minus: [[f64; NU]; NU],
    plus: [[f64; NU]; NU],
    data: [[f64; 2]; NU],
}

impl FluxMap {
    fn zero() -> Self {
        FluxMap {
            minus: [[0.0; NU]; NU],
            plus: [[0.0; NU]; NU],
            data: [[0.0; 2]; NU],
        }
    }
}

fn columns(f: impl Fn(&State) -> State) -> [[f64; NU]; NU] {
    let mut a = [[0.0; NU]; NU];
    for j in 0..NU {
        let mut e = [0.0; NU];
        e[j] = 1.0;
        let col = f(&e);
        for i in 0..NU {
            a[i][j] = col[i];
        }
    }
    a
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum FaceData {
    None,
    Velocity(usize),
    Traction(usize),
}

#[derive(Clone, Debug)]
struct FaceOps {
    kind: FaceKind,
    minus: usize,
    plus: Option<usize>,
    points: Vec<Point>,
    weights: Vec<f64>,
    normals: Vec<[f64; 2]>,
    basis_minus: Vec<f64>,
    basis_plus: Vec<f64>,
    maps: Vec<FluxMap>,
    data: FaceData,
}

impl FaceOps {
    fn map(&self, k: usize) -> &FluxMap {
        if self.maps.len() == 1 {
            &self.maps[0]
        } else {
            &self.maps[k]
        }
    }
}

#[derive(Clone, Debug)]
struct ElementOps {
    basis: Basis,
    mass: MassMatrix,
    /// `D_i[k][l] = ∫ ∂_i B_k B_l dV`, row-major.
    stiffness: Arc<[Vec<f64>; 2]>,
    /// Basis values at the element's volume quadrature points.
    values: Arc<Vec<f64>>,
    /// Faces touching this element and whether it is their minus side.
    faces: Vec<(usize, bool)>,
}

/// Plus-side states on coarse-fine faces: `(face, point) → U⁺`.
/// Exterior state at point `k` of face `f` for faces without a plus element;
/// `None` falls back to the interior trace.
pub type Exterior<'a> = &'a (dyn Fn(usize, usize) -> Option<State> + Sync);

/// Assembled discretization of one mesh at one polynomial degree.
pub struct Discretization {
    pub mesh: ImplicitMesh,
    pub degree: usize,
    /// Material of each mesh phase, in `mesh.phases` order.
    pub materials: Vec<Material>,
    pub bcs: BcTable,
    np: usize,
    kmats: Vec<[[[f64; NU]; NU]; 2]>,
    elements: Vec<ElementOps>,
    faces: Vec<FaceOps>,
    /// Boundary callbacks referenced by `FaceData`.
    velocity_data: Vec<VelocityData>,
    traction_data: Vec<TractionData>,
    face_offsets: Vec<usize>,
}

impl std::fmt::Debug for Discretization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Discretization")
            .field("degree", &self.degree)
            .field("elements", &self.elements.len())
            .field("faces", &self.faces.len())
            .finish()
    }
}

fn stiffness_tables(element: &Element, basis: &Basis) -> [Vec<f64>; 2] {
    let np = basis.len();
    let mut d = [vec![0.0; np * np], vec![0.0; np * np]];
    let mut v = vec![0.0; np];
    let mut g = vec![[0.0; 2]; np];
    for (x, w) in element.quad.nodes.iter().zip(&element.quad.weights) {
        basis.eval_grad(*x, &mut v, &mut g);
        for k in 0..np {
            for (i, di) in d.iter_mut().enumerate() {
                let gk = w * g[k][i];
                if gk == 0.0 {
                    continue;
                }
                for l in 0..np {
                    di[k * np + l] += gk * v[l];
                }
            }
        }
    }
    d
}

fn volume_values(element: &Element, basis: &Basis) -> Vec<f64> {
    let np = basis.len();
    let mut out = vec![0.0; element.quad.len() * np];
    for (x, chunk) in element.quad.nodes.iter().zip(out.chunks_mut(np)) {
        basis.eval(*x, chunk);
    }
    out
}

impl Discretization {
    pub fn new(mesh: ImplicitMesh, degree: usize, materials: Vec<Material>, bcs: BcTable) -> Result<Self> {
        if materials.len() != mesh.phases.len() {
            return Err(Error::Config(format!(
                "{} materials given for {} phases",
                materials.len(),
                mesh.phases.len()
            )));
        }
        for (axis, sides) in [(0, [Side::Left, Side::Right]), (1, [Side::Bottom, Side::Top])] {
            for side in sides {
                let periodic_bc = matches!(bcs.side(side), BoundaryCondition::Periodic);
                if periodic_bc != mesh.grid.periodic[axis] {
                    return Err(Error::Config(format!(
                        "{} boundary condition '{}' does not match the grid periodicity",
                        side.name(),
                        bcs.side(side).name()
                    )));
                }
            }
        }
        if matches!(bcs.contour, BoundaryCondition::Periodic) {
            return Err(Error::Config("the zero contour cannot be periodic".into()));
        }
        let np = (degree + 1) * (degree + 1);
        let kmats = materials.iter().map(Material::flux_matrices).collect();

        // regular elements share their tables
        let mut shared: Option<SharedTables> = None;
        if let Some(e) = mesh.elements.iter().find(|e| e.regular) {
            let b = Basis::of(e, degree)?;
            shared = Some((Arc::new(stiffness_tables(e, &b)), Arc::new(volume_values(e, &b))));
        }
        let mut elements = mesh
            .elements
            .par_iter()
            .enumerate()
            .map(|(i, e)| {
                let basis = Basis::of(e, degree)?;
                match (&shared, e.regular) {
                    (Some((s, v)), true) => Ok(ElementOps {
                        basis,
                        mass: MassMatrix::identity(np),
                        stiffness: s.clone(),
                        values: v.clone(),
                        faces: Vec::new(),
                    }),
                    _ => Ok(ElementOps {
                        basis,
                        mass: mass_matrix(e, &basis, i)?,
                        stiffness: Arc::new(stiffness_tables(e, &basis)),
                        values: Arc::new(volume_values(e, &basis)),
                        faces: Vec::new(),
                    }),
                }
            })
            .collect::<Result<Vec<_>>>()?;

        let phase_of = |e: usize| {
            mesh.phase_index(mesh.elements[e].phase)
                .expect("element phase is meshed")
        };
        let mut velocity_data = Vec::new();
        let mut traction_data = Vec::new();
        let mut faces = Vec::with_capacity(mesh.faces.len());
        for (fi, face) in mesh.faces.iter().enumerate() {
            let normals = face.normals().to_vec();
            let straight = normals.windows(2).all(|w| w[0] == w[1]);
            let mat_m = materials[phase_of(face.minus)];
            let bc = match face.kind {
                FaceKind::OuterBoundary(side) => Some(bcs.side(side).clone()),
                FaceKind::EmbeddedBoundary => Some(bcs.contour.clone()),
                _ => None,
            };
            let mut data = FaceData::None;
            match &bc {
                Some(BoundaryCondition::Velocity(f)) => {
                    data = FaceData::Velocity(velocity_data.len());
                    velocity_data.push(f.clone());
                }
                Some(BoundaryCondition::Traction(f)) => {
                    data = FaceData::Traction(traction_data.len());
                    traction_data.push(f.clone());
                }
                Some(BoundaryCondition::Periodic) => {
                    return Err(Error::Config("periodic condition on a non-periodic boundary".into()));
                }
                _ => {}
            }
            let build_map = |n: [f64; 2]| -> Result<FluxMap> {
                let mut m = FluxMap::zero();
                match (&bc, face.plus) {
                    (None, Some(_)) if face.kind == FaceKind::Intraphase => {
                        (m.minus, m.plus) = upwind_matrices(n, &mat_m)?;
                    }
                    (None, Some(p)) => {
                        let s = InterfaceSolver::new(n, &mat_m, &materials[phase_of(p)])?;
                        m.minus = columns(|u| s.flux(u, &[0.0; NU]));
                        m.plus = columns(|u| s.flux(&[0.0; NU], u));
                    }
                    (None, None) => {
                        // coarse-fine: the exterior shares the minus material
                        let s = InterfaceSolver::new(n, &mat_m, &mat_m)?;
                        m.minus = columns(|u| s.flux(u, &[0.0; NU]));
                        m.plus = columns(|u| s.flux(&[0.0; NU], u));
                    }
                    (Some(bc), _) => {
                        let s = BoundarySolver::new(n, &mat_m)?;
                        match bc {
                            BoundaryCondition::Velocity(_) => {
                                m.minus = columns(|u| s.velocity_flux(u, [0.0; 2]));
                                for d in 0..2 {
                                    let mut g = [0.0; 2];
                                    g[d] = 1.0;
                                    let col = s.velocity_flux(&[0.0; NU], g);
                                    for i in 0..NU {
                                        m.data[i][d] = col[i];
                                    }
                                }
                            }
                            BoundaryCondition::Traction(_) => {
                                m.minus = columns(|u| s.traction_flux(u, [0.0; 2]));
                                for d in 0..2 {
                                    let mut g = [0.0; 2];
                                    g[d] = 1.0;
                                    let col = s.traction_flux(&[0.0; NU], g);
                                    for i in 0..NU {
                                        m.data[i][d] = col[i];
                                    }
                                }
                            }
                            BoundaryCondition::Absorbing => {
                                m.minus = columns(|u| s.absorbing_flux(u));
                            }
                            BoundaryCondition::Periodic => unreachable!("rejected above"),
                        }
                    }
                }
                Ok(m)
            };
            let maps = if straight && !normals.is_empty() {
                vec![build_map(normals[0])?]
            } else {
                normals.iter().map(|n| build_map(*n)).collect::<Result<Vec<_>>>()?
            };
            let points = face.quad.nodes.clone();
            let bm = elements[face.minus].basis;
            let mut basis_minus = vec![0.0; points.len() * np];
            for (x, chunk) in points.iter().zip(basis_minus.chunks_mut(np)) {
                bm.eval(*x, chunk);
            }
            let mut basis_plus = Vec::new();
            if let Some(p) = face.plus {
                let bp = elements[p].basis;
                basis_plus = vec![0.0; points.len() * np];
                for (x, chunk) in points.iter().zip(basis_plus.chunks_mut(np)) {
                    bp.eval([x[0] + face.plus_shift[0], x[1] + face.plus_shift[1]], chunk);
                }
            }
            elements[face.minus].faces.push((fi, true));
            if let Some(p) = face.plus {
                elements[p].faces.push((fi, false));
            }
            faces.push(FaceOps {
                kind: face.kind,
                minus: face.minus,
                plus: face.plus,
                points,
                weights: face.quad.weights.clone(),
                normals,
                basis_minus,
                basis_plus,
                maps,
                data,
            });
        }
        let mut face_offsets = Vec::with_capacity(faces.len() + 1);
        let mut off = 0;
        for f in &faces {
            face_offsets.push(off);
            off += f.points.len();
        }
        face_offsets.push(off);
        Ok(Discretization {
            mesh,
            degree,
            materials,
            bcs,
            np,
            kmats,
            elements,
            faces,
            velocity_data,
            traction_data,
            face_offsets,
        })
    }

    pub fn num_basis(&self) -> usize {
        self.np
    }

    pub fn num_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn basis(&self, e: usize) -> &Basis {
        &self.elements[e].basis
    }

    pub fn mass(&self, e: usize) -> &MassMatrix {
        &self.elements[e].mass
    }

    pub fn material_of(&self, e: usize) -> &Material {
        &self.materials[self.phase_slot(e)]
    }

    fn phase_slot(&self, e: usize) -> usize {
        self.mesh
            .phase_index(self.mesh.elements[e].phase)
            .expect("element phase is meshed")
    }

    pub fn zeros(&self) -> Solution {
        Solution::zeros(self.elements.len(), self.np)
    }

    /// State of element `e` at `x` (polynomial extension outside the cell).
    pub fn evaluate(&self, sol: &Solution, e: usize, x: Point) -> State {
        let mut v = [0.0; (MAX_DEGREE + 1) * (MAX_DEGREE + 1)];
        let np = self.np;
        self.elements[e].basis.eval(x, &mut v[..np]);
        combine(&v[..np], sol.element(e), np)
    }

    /// Element of `phase` covering `x` and the state there.
    pub fn evaluate_at(&self, sol: &Solution, phase: PhaseSign, x: Point) -> Option<(usize, State)> {
        if !self.mesh.grid.rect.contains(x) {
            return None;
        }
        let e = self.mesh.element_at(phase, x)?;
        Some((e, self.evaluate(sol, e, x)))
    }

    /// L² projection of `field` on every element.
    pub fn project(&self, field: impl Fn(Point, PhaseSign) -> State + Sync) -> Solution {
        let mut sol = self.zeros();
        let np = self.np;
        sol.data.par_chunks_mut(NU * np).enumerate().for_each(|(e, out)| {
            let el = &self.mesh.elements[e];
            let ops = &self.elements[e];
            for (k, (x, w)) in el.quad.nodes.iter().zip(&el.quad.weights).enumerate() {
                let u = field(*x, el.phase);
                let b = &ops.values[k * np..(k + 1) * np];
                for c in 0..NU {
                    let wu = w * u[c];
                    for l in 0..np {
                        out[c * np + l] += wu * b[l];
                    }
                }
            }
            ops.mass.solve(out);
        });
        sol
    }

    /// Point source in the element of `phase` containing `position`, which
    /// may lie on the zero contour.
    pub fn point_source(
        &self,
        ls: &LevelSet,
        phase: PhaseSign,
        position: Point,
        direction: [f64; 2],
        wavelet: Ricker,
    ) -> Result<PointSource> {
        // points on the zero contour belong to the closure of the phase
        let g = ls.gradient(position);
        let tol = 1e-10 * g[0].hypot(g[1]) * self.mesh.grid.min_h();
        if !self.mesh.grid.rect.contains(position) || phase.factor() * ls.value(position) > tol {
            return Err(Error::SourceOutsideDomain(position));
        }
        let e = self
            .mesh
            .element_at(phase, position)
            .ok_or(Error::SourceOutsideDomain(position))?;
        let norm = direction[0].hypot(direction[1]);
        if !(norm > 0.0) {
            return Err(Error::Config("source direction must be nonzero".into()));
        }
        Ok(PointSource {
            element: e,
            position,
            direction: [direction[0] / norm, direction[1] / norm],
            wavelet,
            values: self.elements[e].basis.values(position),
        })
    }

    /// `𝔸` for the given coefficients, without sources; `M Ẋ = 𝔸`.
    pub fn residual(&self, t: f64, sol: &Solution, exterior: Option<Exterior<'_>>) -> Solution {
        let mut out = self.zeros();
        self.assemble(t, sol, exterior, None, &mut out);
        out
    }

    /// `Ẋ = M⁻¹ (𝔸 + sources)` written into `out`.
    pub fn rhs_into(
        &self,
        t: f64,
        sol: &Solution,
        sources: &[PointSource],
        exterior: Option<Exterior<'_>>,
        out: &mut Solution,
    ) {
        self.residual_into(t, sol, exterior, None, out);
        self.add_sources(t, sources, out);
        self.solve_mass(out);
    }

    /// `𝔸` written into `out`. Faces flagged in `skip` contribute nothing.
    pub fn residual_into(
        &self,
        t: f64,
        sol: &Solution,
        exterior: Option<Exterior<'_>>,
        skip: Option<&[bool]>,
        out: &mut Solution,
    ) {
        self.assemble(t, sol, exterior, skip, out);
    }

    pub fn add_sources(&self, t: f64, sources: &[PointSource], out: &mut Solution) {
        for s in sources {
            point_source_term(s, t, self.np, out.element_mut(s.element));
        }
    }

    /// Applies `M⁻¹` blockwise in place.
    pub fn solve_mass(&self, out: &mut Solution) {
        let np = self.np;
        out.data
            .par_chunks_mut(NU * np)
            .zip(&self.elements)
            .for_each(|(r, ops)| ops.mass.solve(r));
    }

    /// Numerical flux at point `k` of face `fi`, oriented along the face
    /// normal.
    pub fn face_flux(&self, t: f64, sol: &Solution, fi: usize, k: usize, exterior: Option<Exterior<'_>>) -> State {
        let f = &self.faces[fi];
        let np = self.np;
        let um = combine(&f.basis_minus[k * np..(k + 1) * np], sol.element(f.minus), np);
        let up = match (f.plus, f.kind) {
            (Some(p), _) => combine(&f.basis_plus[k * np..(k + 1) * np], sol.element(p), np),
            (None, FaceKind::CoarseFine) => exterior.and_then(|ext| ext(fi, k)).unwrap_or(um),
            _ => [0.0; NU],
        };
        let m = f.map(k);
        let g = match f.data {
            FaceData::None => [0.0; 2],
            FaceData::Velocity(i) => (self.velocity_data[i])(t, f.points[k]),
            FaceData::Traction(i) => (self.traction_data[i])(t, f.points[k], f.normals[k]),
        };
        let mut fl = [0.0; NU];
        for i in 0..NU {
            let mut s = m.data[i][0] * g[0] + m.data[i][1] * g[1];
            for j in 0..NU {
                s += m.minus[i][j] * um[j] + m.plus[i][j] * up[j];
            }
            fl[i] = s;
        }
        fl
    }

    fn face_fluxes(&self, t: f64, sol: &Solution, exterior: Option<Exterior<'_>>, skip: Option<&[bool]>) -> Vec<State> {
        let total = *self.face_offsets.last().expect("offsets are never empty");
        let mut flux = vec![[0.0; NU]; total];
        let mut slices = Vec::with_capacity(self.faces.len());
        let mut rest = flux.as_mut_slice();
        for f in &self.faces {
            let (a, b) = rest.split_at_mut(f.points.len());
            slices.push(a);
            rest = b;
        }
        slices.into_par_iter().enumerate().for_each(|(fi, out)| {
            if skip.is_some_and(|s| s[fi]) {
                return;
            }
            for (k, fl) in out.iter_mut().enumerate() {
                *fl = self.face_flux(t, sol, fi, k, exterior);
            }
        });
        flux
    }

    fn assemble(
        &self,
        t: f64,
        sol: &Solution,
        exterior: Option<Exterior<'_>>,
        skip: Option<&[bool]>,
        out: &mut Solution,
    ) {
        let np = self.np;
        let flux = self.face_fluxes(t, sol, exterior, skip);
        out.data.par_chunks_mut(NU * np).enumerate().for_each(|(e, r)| {
            r.iter_mut().for_each(|v| *v = 0.0);
            let ops = &self.elements[e];
            let x = sol.element(e);
            let kmat = &self.kmats[self.phase_slot(e)];
            // volume term Σ_i D_i (K_i X)
            let mut y = [0.0; NU * (MAX_DEGREE + 1) * (MAX_DEGREE + 1)];
            for (i, d) in ops.stiffness.iter().enumerate() {
                let ki = &kmat[i];
                for c in 0..NU {
                    let yc = &mut y[c * np..(c + 1) * np];
                    yc.iter_mut().for_each(|v| *v = 0.0);
                    for cc in 0..NU {
                        let kv = ki[c][cc];
                        if kv != 0.0 {
                            for l in 0..np {
                                yc[l] += kv * x[cc * np + l];
                            }
                        }
                    }
                }
                for k in 0..np {
                    let row = &d[k * np..(k + 1) * np];
                    for c in 0..NU {
                        let yc = &y[c * np..(c + 1) * np];
                        let mut s = 0.0;
                        for l in 0..np {
                            s += row[l] * yc[l];
                        }
                        r[c * np + k] += s;
                    }
                }
            }
            // face terms
            for &(fi, is_minus) in &ops.faces {
                if skip.is_some_and(|s| s[fi]) {
                    continue;
                }
                let f = &self.faces[fi];
                let fl = &flux[self.face_offsets[fi]..self.face_offsets[fi + 1]];
                let (b, sign) = if is_minus {
                    (&f.basis_minus, -1.0)
                } else {
                    (&f.basis_plus, 1.0)
                };
                for (k, fk) in fl.iter().enumerate() {
                    let bk = &b[k * np..(k + 1) * np];
                    let w = sign * f.weights[k];
                    for c in 0..NU {
                        let s = w * fk[c];
                        for l in 0..np {
                            r[c * np + l] += s * bk[l];
                        }
                    }
                }
            }
        });
    }

    /// Energy of one element.
    pub fn element_energy(&self, sol: &Solution, e: usize) -> f64 {
        let el = &self.mesh.elements[e];
        let ops = &self.elements[e];
        let mat = self.material_of(e);
        let x = sol.element(e);
        let np = self.np;
        el.quad
            .weights
            .iter()
            .enumerate()
            .map(|(k, w)| w * mat.energy_density(&combine(&ops.values[k * np..(k + 1) * np], x, np)))
            .sum()
    }

    /// Energy of each mesh phase, in `mesh.phases` order.
    pub fn energy(&self, sol: &Solution) -> Vec<f64> {
        let per: Vec<f64> = (0..self.elements.len())
            .into_par_iter()
            .map(|e| self.element_energy(sol, e))
            .collect();
        let mut out = vec![0.0; self.mesh.phases.len()];
        for (e, v) in per.iter().enumerate() {
            out[self.phase_slot(e)] += v;
        }
        out
    }

    pub fn total_energy(&self, sol: &Solution) -> f64 {
        self.energy(sol).iter().sum()
    }

    /// `(e_L∞, e_L2)` against `exact` at time `t` over volume quadrature points.
    pub fn error_measures(&self, sol: &Solution, exact: impl Fn(Point, f64) -> State + Sync, t: f64) -> (f64, f64) {
        self.error_parts(sol, exact, t, |_| true).measures()
    }

    /// Error sums over the elements selected by `include`, for combining
    /// several meshes into one measure.
    pub fn error_parts(
        &self,
        sol: &Solution,
        exact: impl Fn(Point, f64) -> State + Sync,
        t: f64,
        include: impl Fn(usize) -> bool + Sync,
    ) -> ErrorParts {
        let np = self.np;
        (0..self.elements.len())
            .into_par_iter()
            .filter(|&e| include(e))
            .map(|e| {
                let el = &self.mesh.elements[e];
                let ops = &self.elements[e];
                let mat = self.material_of(e);
                let x = sol.element(e);
                let mut acc = ErrorParts::default();
                for (k, (p, w)) in el.quad.nodes.iter().zip(&el.quad.weights).enumerate() {
                    let u = combine(&ops.values[k * np..(k + 1) * np], x, np);
                    let ue = exact(*p, t);
                    let mut d = [0.0; NU];
                    for c in 0..NU {
                        d[c] = u[c] - ue[c];
                        acc.max_error = acc.max_error.max(d[c].abs());
                        acc.max_exact = acc.max_exact.max(ue[c].abs());
                    }
                    acc.error_energy += w * mat.energy_density(&d);
                    acc.exact_energy += w * mat.energy_density(&ue);
                }
                acc
            })
            .collect::<Vec<_>>()
            .into_iter()
            .fold(ErrorParts::default(), ErrorParts::merge)
    }

    /// Largest wave speed among the mesh materials.
    pub fn max_wave_speed(&self) -> f64 {
        self.materials
            .iter()
            .map(crate::physics::max_wave_speed)
            .fold(0.0, f64::max)
    }

    /// Volume quadrature point values of element `e`, for callers that
    /// integrate their own quantities.
    pub fn volume_basis(&self, e: usize) -> &[f64] {
        &self.elements[e].values
    }
}

#[inline]
pub(crate) fn combine(b: &[f64], x: &[f64], np: usize) -> State {
    let mut u = [0.0; NU];
    for c in 0..NU {
        let xc = &x[c * np..(c + 1) * np];
        let mut s = 0.0;
        for l in 0..np {
            s += b[l] * xc[l];
        }
        u[c] = s;
    }
    u
}

/// Adds `R_w(t) 𝔹ᵀ(s) û` to the momentum block of `residual`.
pub fn point_source_term(source: &PointSource, t: f64, np: usize, residual: &mut [f64]) {
    let a = source.wavelet.eval(t);
    add_point_force(a, source.direction, &source.values, np, residual);
}

/// Adds `amplitude 𝔹ᵀ(s) û` given the basis values at `s`.
pub fn add_point_force(amplitude: f64, direction: [f64; 2], values: &[f64], np: usize, residual: &mut [f64]) {
    for c in 0..NV {
        let s = amplitude * direction[c];
        for l in 0..np {
            residual[c * np + l] += s * values[l];
        }
    }
}
