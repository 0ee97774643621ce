//! Linear elasticity in momentum-strain form.
//!
//! The state is `U = (m1, m2, γ11, γ22, γ12)` with Voigt strain (engineering
//! shear). The system reads `∂U/∂t + Σ_i ∂F_i/∂x_i = 0` with
//! `F_i = (-I_iᵀ c γ, -ρ⁻¹ I_i m)`.

use nalgebra::{Matrix2, Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;

pub const NV: usize = 2;
pub const NS: usize = 3;
pub const NU: usize = NV + NS;

pub type State = [f64; NU];

/// `I_n` as a 3x2 matrix, stored row-major.
#[inline]
pub fn i_n(n: [f64; 2]) -> [[f64; 2]; 3] {
    [[n[0], 0.0], [0.0, n[1]], [n[1], n[0]]]
}

/// `I_nᵀ s` for a Voigt vector `s`.
#[inline]
pub fn i_n_t(n: [f64; 2], s: [f64; 3]) -> [f64; 2] {
    [n[0] * s[0] + n[1] * s[2], n[1] * s[1] + n[0] * s[2]]
}

/// `I_n v` for a vector `v`.
#[inline]
pub fn i_n_v(n: [f64; 2], v: [f64; 2]) -> [f64; 3] {
    [n[0] * v[0], n[1] * v[1], n[1] * v[0] + n[0] * v[1]]
}

/// A homogeneous linear elastic solid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub rho: f64,
    /// Voigt stiffness, row-major.
    pub c: [[f64; 3]; 3],
}

impl Material {
    pub fn new(rho: f64, c: [[f64; 3]; 3]) -> Result<Self> {
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::InvalidMaterial(format!("density must be positive, got {rho}")));
        }
        let scale = c.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidMaterial("stiffness must be finite and nonzero".into()));
        }
        for i in 0..3 {
            for j in 0..i {
                if (c[i][j] - c[j][i]).abs() > 1e-12 * scale {
                    return Err(Error::InvalidMaterial(format!(
                        "stiffness is not symmetric: c[{i}][{j}] = {} but c[{j}][{i}] = {}",
                        c[i][j], c[j][i]
                    )));
                }
            }
        }
        let eig = SymmetricEigen::new(Matrix3::from_fn(|i, j| c[i][j]));
        let min = eig.eigenvalues.min();
        if min <= 0.0 {
            return Err(Error::InvalidMaterial(format!(
                "stiffness is not positive definite (smallest eigenvalue {min:.3e})"
            )));
        }
        Ok(Material { rho, c })
    }

    /// Plane-strain isotropic material from Young's modulus and Poisson's ratio.
    pub fn isotropic(young: f64, poisson: f64, rho: f64) -> Result<Self> {
        Material::new(rho, isotropic_stiffness(young, poisson)?)
    }

    /// Isotropic material from density and P/S wave speeds.
    pub fn from_speeds(rho: f64, cp: f64, cs: f64) -> Result<Self> {
        if !(cp > 0.0 && cs > 0.0 && cp > cs * 2f64.sqrt() * (1.0 - 1e-12)) {
            return Err(Error::InvalidMaterial(format!(
                "wave speeds need cp > √2 cs > 0 for a positive-definite plane-strain stiffness, got cp={cp}, cs={cs}"
            )));
        }
        let mu = rho * cs * cs;
        let l2m = rho * cp * cp;
        let lambda = l2m - 2.0 * mu;
        Material::new(rho, [[l2m, lambda, 0.0], [lambda, l2m, 0.0], [0.0, 0.0, mu]])
    }

    /// The same material with its stiffness expressed in a frame rotated by
    /// `theta`: `c` is given in axes `(cos θ, sin θ)` and `(-sin θ, cos θ)`.
    pub fn rotated(&self, theta: f64) -> Result<Self> {
        Material::new(self.rho, rotate_voigt(&self.c, theta))
    }

    #[inline]
    pub fn stress(&self, gamma: [f64; 3]) -> [f64; 3] {
        let c = &self.c;
        [
            c[0][0] * gamma[0] + c[0][1] * gamma[1] + c[0][2] * gamma[2],
            c[1][0] * gamma[0] + c[1][1] * gamma[1] + c[1][2] * gamma[2],
            c[2][0] * gamma[0] + c[2][1] * gamma[1] + c[2][2] * gamma[2],
        ]
    }

    /// Flux Jacobians `K_i` with `F_i = K_i U`.
    pub fn flux_matrices(&self) -> [[[f64; NU]; NU]; 2] {
        let mut k = [[[0.0; NU]; NU]; 2];
        for (dir, ki) in k.iter_mut().enumerate() {
            let mut e = [0.0; 2];
            e[dir] = 1.0;
            // momentum rows: -I_iᵀ c
            for col in 0..NS {
                let mut cs = [0.0; 3];
                for (r, v) in cs.iter_mut().enumerate() {
                    *v = self.c[r][col];
                }
                let t = i_n_t(e, cs);
                ki[0][NV + col] = -t[0];
                ki[1][NV + col] = -t[1];
            }
            // strain rows: -ρ⁻¹ I_i
            let im = i_n(e);
            for r in 0..NS {
                for col in 0..NV {
                    ki[NV + r][col] = -im[r][col] / self.rho;
                }
            }
        }
        k
    }

    /// Energy density `½ (|m|²/ρ + γᵀ c γ)`.
    pub fn energy_density(&self, u: &State) -> f64 {
        let g = [u[2], u[3], u[4]];
        let s = self.stress(g);
        0.5 * ((u[0] * u[0] + u[1] * u[1]) / self.rho + g[0] * s[0] + g[1] * s[1] + g[2] * s[2])
    }
}

/// Plane-strain Voigt stiffness from Young's modulus and Poisson's ratio.
pub fn isotropic_stiffness(young: f64, poisson: f64) -> Result<[[f64; 3]; 3]> {
    if !(young > 0.0) || !(poisson > -1.0 && poisson < 0.5) {
        return Err(Error::InvalidMaterial(format!(
            "isotropic material needs Y > 0 and -1 < ν < 0.5, got Y={young}, ν={poisson}"
        )));
    }
    let lambda = young * poisson / ((1.0 + poisson) * (1.0 - 2.0 * poisson));
    let mu = young / (2.0 * (1.0 + poisson));
    Ok([
        [lambda + 2.0 * mu, lambda, 0.0],
        [lambda, lambda + 2.0 * mu, 0.0],
        [0.0, 0.0, mu],
    ])
}

const VOIGT: [[usize; 2]; 3] = [[0, 0], [1, 1], [0, 1]];

fn voigt_index(i: usize, j: usize) -> usize {
    if i == j {
        i
    } else {
        2
    }
}

fn rotate_voigt(c: &[[f64; 3]; 3], theta: f64) -> [[f64; 3]; 3] {
    let (s, co) = theta.sin_cos();
    // columns are the local axes expressed in global coordinates
    let r = [[co, -s], [s, co]];
    let full = |a: usize, b: usize, cc: usize, d: usize| c[voigt_index(a, b)][voigt_index(cc, d)];
    let mut out = [[0.0; 3]; 3];
    for (big_i, &[i, j]) in VOIGT.iter().enumerate() {
        for (big_j, &[k, l]) in VOIGT.iter().enumerate() {
            let mut v = 0.0;
            for a in 0..2 {
                for b in 0..2 {
                    for cc in 0..2 {
                        for d in 0..2 {
                            v += r[i][a] * r[j][b] * r[k][cc] * r[l][d] * full(a, b, cc, d);
                        }
                    }
                }
            }
            out[big_i][big_j] = v;
        }
    }
    out
}

/// `(F_1, F_2)` at state `u`.
pub fn physical_flux(u: &State, mat: &Material) -> (State, State) {
    let m = [u[0], u[1]];
    let s = mat.stress([u[2], u[3], u[4]]);
    let mut out = [[0.0; NU]; 2];
    for (dir, f) in out.iter_mut().enumerate() {
        let mut e = [0.0; 2];
        e[dir] = 1.0;
        let t = i_n_t(e, s);
        let g = i_n_v(e, m);
        *f = [-t[0], -t[1], -g[0] / mat.rho, -g[1] / mat.rho, -g[2] / mat.rho];
    }
    (out[0], out[1])
}

/// Acoustic tensor `Γ(n) = ρ⁻¹ I_nᵀ c I_n`.
pub fn gamma_matrix(n: [f64; 2], mat: &Material) -> Matrix2<f64> {
    let im = i_n(n);
    let mut g = Matrix2::zeros();
    for a in 0..2 {
        for b in 0..2 {
            let mut v = 0.0;
            for r in 0..3 {
                for s in 0..3 {
                    v += im[r][a] * mat.c[r][s] * im[s][b];
                }
            }
            g[(a, b)] = v / mat.rho;
        }
    }
    g
}

/// Eigen-decomposition of a symmetric 2x2 matrix `[[a, b], [b, d]]`.
///
/// Returns eigenvalues in descending order with matching unit eigenvectors.
pub fn sym2_eigen(a: f64, b: f64, d: f64) -> ([f64; 2], [[f64; 2]; 2]) {
    let mean = 0.5 * (a + d);
    let half = 0.5 * (a - d);
    let r = half.hypot(b);
    if r == 0.0 {
        return ([a, d], [[1.0, 0.0], [0.0, 1.0]]);
    }
    let v = if half >= 0.0 { [half + r, b] } else { [b, r - half] };
    let n = v[0].hypot(v[1]);
    let v1 = [v[0] / n, v[1] / n];
    ([mean + r, mean - r], [v1, [-v1[1], v1[0]]])
}

fn largest_speed_sq(mat: &Material, theta: f64) -> f64 {
    let (s, c) = theta.sin_cos();
    let g = gamma_matrix([c, s], mat);
    sym2_eigen(g[(0, 0)], g[(0, 1)], g[(1, 1)]).0[0]
}

/// Maximum phase velocity over all propagation directions.
pub fn max_wave_speed(mat: &Material) -> f64 {
    const SAMPLES: usize = 720;
    let step = std::f64::consts::PI / SAMPLES as f64;
    let (mut best, mut best_theta) = (f64::MIN, 0.0);
    for k in 0..SAMPLES {
        let theta = k as f64 * step;
        let v = largest_speed_sq(mat, theta);
        if v > best {
            best = v;
            best_theta = theta;
        }
    }
    // golden-section polish on the bracketing sample interval
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (best_theta - step, best_theta + step);
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let mut f1 = largest_speed_sq(mat, x1);
    let mut f2 = largest_speed_sq(mat, x2);
    for _ in 0..60 {
        if f1 > f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = largest_speed_sq(mat, x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = largest_speed_sq(mat, x2);
        }
    }
    best.max(f1).max(f2).sqrt()
}

/// One eigenpair of the plane-wave operator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlaneWaveMode {
    pub omega: f64,
    pub u: State,
}

/// `A_κ = Σ_i κ_i K_i`: `Ũ sin(ωt − κ·x)` solves the system iff `A_κ Ũ = ω Ũ`.
pub fn plane_wave_matrix(kappa: [f64; 2], mat: &Material) -> [[f64; NU]; NU] {
    let k = mat.flux_matrices();
    let mut a = [[0.0; NU]; NU];
    for r in 0..NU {
        for c in 0..NU {
            a[r][c] = kappa[0] * k[0][r][c] + kappa[1] * k[1][r][c];
        }
    }
    a
}

fn normalize_sign(u: &mut State) {
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    let big = u
        .iter()
        .copied()
        .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
    let s = if big < 0.0 { -1.0 / norm } else { 1.0 / norm };
    for v in u.iter_mut() {
        *v *= s;
    }
}

/// All five plane-wave eigenpairs for wave vector `kappa`, ordered by
/// descending frequency. Eigenvectors have unit Euclidean norm.
pub fn plane_wave_modes(kappa: [f64; 2], mat: &Material) -> Result<Vec<PlaneWaveMode>> {
    if kappa[0] == 0.0 && kappa[1] == 0.0 {
        return Err(Error::SingularWaveVector);
    }
    let g = gamma_matrix(kappa, mat);
    let (lams, vecs) = sym2_eigen(g[(0, 0)], g[(0, 1)], g[(1, 1)]);
    let mut modes = Vec::with_capacity(NU);
    let wave = |omega: f64, m: [f64; 2]| {
        let im = i_n_v(kappa, m);
        let s = -1.0 / (omega * mat.rho);
        let mut u = [m[0], m[1], s * im[0], s * im[1], s * im[2]];
        normalize_sign(&mut u);
        PlaneWaveMode { omega, u }
    };
    for (lam, v) in lams.iter().zip(&vecs) {
        modes.push(wave(lam.sqrt(), *v));
    }
    for (lam, v) in lams.iter().zip(&vecs).rev() {
        modes.push(wave(-lam.sqrt(), *v));
    }
    // zero mode: c⁻¹ w with w spanning null(I_κᵀ)
    let w = nalgebra::Vector3::new(kappa[1] * kappa[1], kappa[0] * kappa[0], -kappa[0] * kappa[1]);
    let c = Matrix3::from_fn(|i, j| mat.c[i][j]);
    let z = c
        .cholesky()
        .ok_or_else(|| Error::InvalidMaterial("stiffness is not positive definite".into()))?
        .solve(&w);
    let mut u = [0.0, 0.0, z[0], z[1], z[2]];
    normalize_sign(&mut u);
    modes.insert(NV, PlaneWaveMode { omega: 0.0, u });
    Ok(modes)
}

/// `U(t, x) = Σ_v Ũ_v sin(ω_v t − κ·x)`.
pub fn exact_solution(t: f64, x: Point, modes: &[PlaneWaveMode], kappa: [f64; 2]) -> State {
    let phase = kappa[0] * x[0] + kappa[1] * x[1];
    let mut u = [0.0; NU];
    for mode in modes {
        let s = (mode.omega * t - phase).sin();
        for (ui, mi) in u.iter_mut().zip(&mode.u) {
            *ui += mi * s;
        }
    }
    u
}
