//! Numerical fluxes from the exact elastic Riemann solution across a face.
//!
//! With `n` pointing from the minus to the plus side, traction `t = I_nᵀ c γ`
//! and velocity `v = m/ρ`, the outgoing characteristics give
//!
//! ```text
//! t* − Z⁻ v* = t⁻ − Z⁻ v⁻        (carried from the minus side)
//! t* + Z⁺ v* = t⁺ + Z⁺ v⁺        (carried from the plus side)
//! ```
//!
//! where `Z = ρ Σ_k c_k m̂_k m̂_kᵀ` is the impedance built from the
//! eigen-decomposition of `Γ(n)`. The flux is `F̂ = (−t*, −I_n v*)`.

use crate::error::{Error, Result};
use crate::physics::{gamma_matrix, i_n_t, i_n_v, plane_wave_modes, sym2_eigen, Material, State, NU};

pub type Mat2 = [[f64; 2]; 2];

#[inline]
fn mul(a: &Mat2, v: [f64; 2]) -> [f64; 2] {
    [a[0][0] * v[0] + a[0][1] * v[1], a[1][0] * v[0] + a[1][1] * v[1]]
}

fn inverse(a: &Mat2) -> Option<Mat2> {
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(det.abs() > 1e-14 * scale * scale) {
        return None;
    }
    let inv = 1.0 / det;
    Some([[a[1][1] * inv, -a[0][1] * inv], [-a[1][0] * inv, a[0][0] * inv]])
}

/// Impedance `Z(n) = ρ Σ_k c_k m̂_k m̂_kᵀ` of `mat` in direction `n`.
pub fn impedance(n: [f64; 2], mat: &Material) -> Mat2 {
    let g = gamma_matrix(n, mat);
    let (lams, vecs) = sym2_eigen(g[(0, 0)], g[(0, 1)], g[(1, 1)]);
    let mut z = [[0.0; 2]; 2];
    for (lam, v) in lams.iter().zip(&vecs) {
        let s = mat.rho * lam.max(0.0).sqrt();
        for a in 0..2 {
            for b in 0..2 {
                z[a][b] += s * v[a] * v[b];
            }
        }
    }
    z
}

#[inline]
pub fn velocity(u: &State, mat: &Material) -> [f64; 2] {
    [u[0] / mat.rho, u[1] / mat.rho]
}

#[inline]
pub fn traction(u: &State, n: [f64; 2], mat: &Material) -> [f64; 2] {
    i_n_t(n, mat.stress([u[2], u[3], u[4]]))
}

/// `(−t*, −I_n v*)`.
#[inline]
pub fn flux_from_star(n: [f64; 2], v: [f64; 2], t: [f64; 2]) -> State {
    let g = i_n_v(n, v);
    [-t[0], -t[1], -g[0], -g[1], -g[2]]
}

/// Face data for the upwind flux between two (possibly different) materials.
#[derive(Clone, Copy, Debug)]
pub struct NormalFluxContext<'a> {
    pub n: [f64; 2],
    pub mat_minus: &'a Material,
    pub mat_plus: &'a Material,
    pub u_minus: State,
    pub u_plus: State,
}

/// Precomputed impedances for one normal and material pair.
#[derive(Clone, Copy, Debug)]
pub struct InterfaceSolver {
    pub n: [f64; 2],
    pub mat_minus: Material,
    pub mat_plus: Material,
    z_minus: Mat2,
    z_plus: Mat2,
    inv_sum: Mat2,
}

impl InterfaceSolver {
    pub fn new(n: [f64; 2], mat_minus: &Material, mat_plus: &Material) -> Result<Self> {
        let z_minus = impedance(n, mat_minus);
        let z_plus = impedance(n, mat_plus);
        let sum = [
            [z_minus[0][0] + z_plus[0][0], z_minus[0][1] + z_plus[0][1]],
            [z_minus[1][0] + z_plus[1][0], z_minus[1][1] + z_plus[1][1]],
        ];
        let inv_sum = inverse(&sum).ok_or(Error::DegenerateImpedance)?;
        Ok(InterfaceSolver {
            n,
            mat_minus: *mat_minus,
            mat_plus: *mat_plus,
            z_minus,
            z_plus,
            inv_sum,
        })
    }

    /// Interface velocity and traction `(v*, t*)`.
    pub fn star(&self, u_minus: &State, u_plus: &State) -> ([f64; 2], [f64; 2]) {
        let vm = velocity(u_minus, &self.mat_minus);
        let vp = velocity(u_plus, &self.mat_plus);
        let tm = traction(u_minus, self.n, &self.mat_minus);
        let tp = traction(u_plus, self.n, &self.mat_plus);
        let zm_vm = mul(&self.z_minus, vm);
        let zp_vp = mul(&self.z_plus, vp);
        let rhs = [zm_vm[0] + zp_vp[0] + tp[0] - tm[0], zm_vm[1] + zp_vp[1] + tp[1] - tm[1]];
        let v = mul(&self.inv_sum, rhs);
        let dz = mul(&self.z_minus, [v[0] - vm[0], v[1] - vm[1]]);
        (v, [tm[0] + dz[0], tm[1] + dz[1]])
    }

    pub fn flux(&self, u_minus: &State, u_plus: &State) -> State {
        let (v, t) = self.star(u_minus, u_plus);
        flux_from_star(self.n, v, t)
    }
}

/// Upwind flux `F̂_n` between the two sides of a face.
pub fn upwind_flux(ctx: &NormalFluxContext<'_>) -> Result<State> {
    let solver = InterfaceSolver::new(ctx.n, ctx.mat_minus, ctx.mat_plus)?;
    Ok(solver.flux(&ctx.u_minus, &ctx.u_plus))
}

/// Matrix acting on a state vector.
pub type FluxMatrix = [[f64; NU]; NU];

/// Godunov splitting `(A⁺, A⁻)` of `A_n = Σ n_i K_i` for a single material,
/// so that the flux between two states of that material is `A⁺u⁻ + A⁻u⁺`.
/// Built from the eigenvectors of `A_n` rather than from impedances.
pub fn upwind_matrices(n: [f64; 2], mat: &Material) -> Result<(FluxMatrix, FluxMatrix)> {
    let modes = plane_wave_modes(n, mat)?;
    let r = nalgebra::SMatrix::<f64, NU, NU>::from_fn(|i, k| modes[k].u[i]);
    let r_inv = r.try_inverse().ok_or(Error::DegenerateImpedance)?;
    let split = |keep: fn(f64) -> bool| {
        let lam = nalgebra::SMatrix::<f64, NU, NU>::from_fn(|i, k| {
            if i == k && keep(modes[k].omega) {
                modes[k].omega
            } else {
                0.0
            }
        });
        let a = r * lam * r_inv;
        std::array::from_fn(|i| std::array::from_fn(|j| a[(i, j)]))
    };
    Ok((split(|w| w > 0.0), split(|w| w < 0.0)))
}

/// Precomputed impedance for boundary fluxes on one side.
#[derive(Clone, Copy, Debug)]
pub struct BoundarySolver {
    pub n: [f64; 2],
    pub mat: Material,
    z: Mat2,
    z_inv: Mat2,
}

impl BoundarySolver {
    pub fn new(n: [f64; 2], mat: &Material) -> Result<Self> {
        let z = impedance(n, mat);
        let z_inv = inverse(&z).ok_or(Error::DegenerateImpedance)?;
        Ok(BoundarySolver { n, mat: *mat, z, z_inv })
    }

    /// `v* = v̄`, `t* = t⁻ + Z (v̄ − v⁻)`.
    pub fn velocity_star(&self, u: &State, vbar: [f64; 2]) -> ([f64; 2], [f64; 2]) {
        let v = velocity(u, &self.mat);
        let t = traction(u, self.n, &self.mat);
        let dz = mul(&self.z, [vbar[0] - v[0], vbar[1] - v[1]]);
        (vbar, [t[0] + dz[0], t[1] + dz[1]])
    }

    /// `t* = t̄`, `v* = v⁻ + Z⁻¹ (t̄ − t⁻)`.
    pub fn traction_star(&self, u: &State, tbar: [f64; 2]) -> ([f64; 2], [f64; 2]) {
        let v = velocity(u, &self.mat);
        let t = traction(u, self.n, &self.mat);
        let dv = mul(&self.z_inv, [tbar[0] - t[0], tbar[1] - t[1]]);
        ([v[0] + dv[0], v[1] + dv[1]], tbar)
    }

    /// Riemann problem against a quiescent exterior of the same material.
    pub fn absorbing_star(&self, u: &State) -> ([f64; 2], [f64; 2]) {
        let v = velocity(u, &self.mat);
        let t = traction(u, self.n, &self.mat);
        let zi_t = mul(&self.z_inv, t);
        let z_v = mul(&self.z, v);
        (
            [0.5 * (v[0] - zi_t[0]), 0.5 * (v[1] - zi_t[1])],
            [0.5 * (t[0] - z_v[0]), 0.5 * (t[1] - z_v[1])],
        )
    }

    pub fn velocity_flux(&self, u: &State, vbar: [f64; 2]) -> State {
        let (v, t) = self.velocity_star(u, vbar);
        flux_from_star(self.n, v, t)
    }

    pub fn traction_flux(&self, u: &State, tbar: [f64; 2]) -> State {
        let (v, t) = self.traction_star(u, tbar);
        flux_from_star(self.n, v, t)
    }

    pub fn absorbing_flux(&self, u: &State) -> State {
        let (v, t) = self.absorbing_star(u);
        flux_from_star(self.n, v, t)
    }
}

/// Flux with the interface velocity pinned to `vbar`.
pub fn boundary_flux_velocity(u: &State, vbar: [f64; 2], n: [f64; 2], mat: &Material) -> Result<State> {
    Ok(BoundarySolver::new(n, mat)?.velocity_flux(u, vbar))
}

/// Flux with the interface traction pinned to `tbar` (`0` is a free surface).
pub fn boundary_flux_traction(u: &State, tbar: [f64; 2], n: [f64; 2], mat: &Material) -> Result<State> {
    Ok(BoundarySolver::new(n, mat)?.traction_flux(u, tbar))
}

/// Non-reflecting flux built from the outgoing part of `u` alone.
pub fn absorbing_flux(u: &State, n: [f64; 2], mat: &Material) -> Result<State> {
    Ok(BoundarySolver::new(n, mat)?.absorbing_flux(u))
}

/// Recovers `(v*, t*)` from a flux vector.
pub fn star_from_flux(n: [f64; 2], f: &State) -> ([f64; 2], [f64; 2]) {
    let t = [-f[0], -f[1]];
    // least squares on I_n v = -f[2..5]; I_nᵀ I_n = [[1, n1 n2], [n1 n2, 1]]
    let rhs = i_n_t(n, [-f[2], -f[3], -f[4]]);
    let m = [[1.0, n[0] * n[1]], [n[0] * n[1], 1.0]];
    let inv = inverse(&m).expect("IᵀI is positive definite for a unit normal");
    (mul(&inv, rhs), t)
}

const _: () = assert!(NU == 5);

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::{physical_flux, plane_wave_modes, Material};
    use nalgebra::{Matrix4, Vector4};
    use proptest::prelude::*;

    fn iso() -> Material {
        Material::isotropic(1.0, 0.3, 1.0).unwrap()
    }

    fn copper() -> Material {
        Material::new(8.92, [[168.0, 121.0, 0.0], [121.0, 168.0, 0.0], [0.0, 0.0, 75.0]]).unwrap()
    }

    fn aniso() -> Material {
        Material::new(
            1.6,
            [
                [0.5637, 0.2963, 0.3158],
                [0.2963, 0.5637, 0.3158],
                [0.3158, 0.3158, 0.3111],
            ],
        )
        .unwrap()
    }

    fn exact_normal_flux(u: &State, n: [f64; 2], mat: &Material) -> State {
        let (f1, f2) = physical_flux(u, mat);
        let mut out = [0.0; NU];
        for i in 0..NU {
            out[i] = n[0] * f1[i] + n[1] * f2[i];
        }
        out
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * scale)
    }

    /// Independent oracle: `(v*, t*)` from a wave decomposition with the
    /// plane-wave eigenvectors. Waves moving in −n change the minus state,
    /// waves moving in +n change the plus state; both ends must agree.
    fn characteristic_star(n: [f64; 2], mm: &Material, mp: &Material, um: &State, up: &State) -> ([f64; 2], [f64; 2]) {
        let vt = |u: &State, mat: &Material| {
            let v = velocity(u, mat);
            let t = traction(u, n, mat);
            [v[0], v[1], t[0], t[1]]
        };
        let minus_modes: Vec<_> = plane_wave_modes(n, mm)
            .unwrap()
            .into_iter()
            .filter(|m| m.omega < 0.0)
            .collect();
        let plus_modes: Vec<_> = plane_wave_modes(n, mp)
            .unwrap()
            .into_iter()
            .filter(|m| m.omega > 0.0)
            .collect();
        let mut a = Matrix4::zeros();
        for (k, m) in minus_modes.iter().enumerate() {
            let w = vt(&m.u, mm);
            for r in 0..4 {
                a[(r, k)] = w[r];
            }
        }
        for (k, m) in plus_modes.iter().enumerate() {
            let w = vt(&m.u, mp);
            for r in 0..4 {
                a[(r, 2 + k)] = -w[r];
            }
        }
        let wm = vt(um, mm);
        let wp = vt(up, mp);
        let rhs = Vector4::from_fn(|r, _| wp[r] - wm[r]);
        let coef = a.lu().solve(&rhs).unwrap();
        let mut s = wm;
        for (k, m) in minus_modes.iter().enumerate() {
            let w = vt(&m.u, mm);
            for r in 0..4 {
                s[r] += coef[k] * w[r];
            }
        }
        ([s[0], s[1]], [s[2], s[3]])
    }

    fn materials() -> impl Strategy<Value = Material> {
        prop_oneof![
            Just(iso()),
            Just(copper()),
            Just(aniso()),
            (0.5f64..10.0, -0.5f64..0.45, 0.1f64..10.0)
                .prop_map(|(y, nu, rho)| Material::isotropic(y, nu, rho).unwrap()),
        ]
    }

    fn state() -> impl Strategy<Value = State> {
        prop::array::uniform5(-1.0f64..1.0)
    }

    #[test]
    fn outgoing_mode_is_transparent() {
        for mat in [iso(), copper(), aniso()] {
            for theta in [0.0, 0.4, 1.3, 2.9] {
                let n = [f64::cos(theta), f64::sin(theta)];
                for mode in plane_wave_modes(n, &mat).unwrap().iter().filter(|m| m.omega > 0.0) {
                    let exact = exact_normal_flux(&mode.u, n, &mat);
                    let ctx = NormalFluxContext {
                        n,
                        mat_minus: &mat,
                        mat_plus: &mat,
                        u_minus: mode.u,
                        u_plus: [0.0; NU],
                    };
                    assert!(close(&upwind_flux(&ctx).unwrap(), &exact, 1e-12));
                    assert!(close(&absorbing_flux(&mode.u, n, &mat).unwrap(), &exact, 1e-12));
                }
            }
        }
    }

    #[test]
    fn absorbing_silences_incoming_modes() {
        let mat = aniso();
        let n = [0.6, 0.8];
        assert_eq!(absorbing_flux(&[0.0; NU], n, &mat).unwrap(), [0.0; NU]);
        for mode in plane_wave_modes(n, &mat).unwrap().iter().filter(|m| m.omega < 0.0) {
            let f = absorbing_flux(&mode.u, n, &mat).unwrap();
            assert!(f.iter().all(|v| v.abs() < 1e-14), "{f:?}");
        }
        // any state: the power leaving the interior, −v*·t*, is non-negative
        let solver = BoundarySolver::new(n, &mat).unwrap();
        for u in [
            [1.0, 0.0, 0.0, 0.0, 0.0],
            [0.2, -0.5, 0.3, 1.0, -0.7],
            [0.0, 0.0, 0.0, 0.0, 1.0],
        ] {
            let (v, t) = solver.absorbing_star(&u);
            assert!(-(v[0] * t[0] + v[1] * t[1]) >= -1e-15);
        }
    }

    #[test]
    fn normal_incidence_oracle() {
        // 1D P and S waves along x between the unit isotropic solid and copper:
        // interface velocity 2 Z1 / (Z1 + Z2) v_i, rigid wall doubles the
        // stress, free surface doubles the velocity.
        let (m1, m2) = (iso(), copper());
        let n = [1.0, 0.0];
        let zp1 = (m1.rho * m1.c[0][0]).sqrt();
        let zs1 = (m1.rho * m1.c[2][2]).sqrt();
        let zp2 = (m2.rho * m2.c[0][0]).sqrt();
        let zs2 = (m2.rho * m2.c[2][2]).sqrt();
        let (vp, vs) = (0.7, -0.3);
        // right-going wave in side 1: σ = −Z v
        let u = [
            m1.rho * vp,
            m1.rho * vs,
            -zp1 * vp / m1.c[0][0],
            0.0,
            -zs1 * vs / m1.c[2][2],
        ];
        // the lateral strain γ22 is zero, so σ22 = λ γ11 does not enter t
        let solver = InterfaceSolver::new(n, &m1, &m2).unwrap();
        let (v, t) = solver.star(&u, &[0.0; NU]);
        let tv = [2.0 * zp1 / (zp1 + zp2) * vp, 2.0 * zs1 / (zs1 + zs2) * vs];
        assert!((v[0] - tv[0]).abs() < 1e-10 && (v[1] - tv[1]).abs() < 1e-10);
        assert!((t[0] + zp2 * tv[0]).abs() < 1e-10 && (t[1] + zs2 * tv[1]).abs() < 1e-10);

        let wall = BoundarySolver::new(n, &m1).unwrap();
        let (v, t) = wall.velocity_star(&u, [0.0, 0.0]);
        assert_eq!(v, [0.0, 0.0]);
        assert!((t[0] + 2.0 * zp1 * vp).abs() < 1e-10 && (t[1] + 2.0 * zs1 * vs).abs() < 1e-10);
        let f = wall.velocity_flux(&u, [0.0, 0.0]);
        assert!((f[0] - 2.0 * zp1 * vp).abs() < 1e-10);

        let (v, t) = wall.traction_star(&u, [0.0, 0.0]);
        assert_eq!(t, [0.0, 0.0]);
        assert!((v[0] - 2.0 * vp).abs() < 1e-10 && (v[1] - 2.0 * vs).abs() < 1e-10);
    }

    #[test]
    fn boundary_fluxes_consistent_for_matching_data() {
        let mat = aniso();
        let n = [0.28, -0.96];
        let u = [0.4, -0.2, 0.1, 0.3, -0.5];
        let exact = exact_normal_flux(&u, n, &mat);
        let v = velocity(&u, &mat);
        let t = traction(&u, n, &mat);
        assert!(close(&boundary_flux_velocity(&u, v, n, &mat).unwrap(), &exact, 1e-13));
        assert!(close(&boundary_flux_traction(&u, t, n, &mat).unwrap(), &exact, 1e-13));
    }

    #[test]
    fn star_round_trip() {
        let n = [0.6, -0.8];
        let f = flux_from_star(n, [0.3, -1.2], [2.0, 0.5]);
        let (v, t) = star_from_flux(n, &f);
        assert!((v[0] - 0.3).abs() < 1e-14 && (v[1] + 1.2).abs() < 1e-14);
        assert_eq!(t, [2.0, 0.5]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn consistency(mat in materials(), u in state(), th in 0.0f64..6.3) {
            let n = [th.cos(), th.sin()];
            let ctx = NormalFluxContext { n, mat_minus: &mat, mat_plus: &mat, u_minus: u, u_plus: u };
            let f = upwind_flux(&ctx).unwrap();
            prop_assert!(close(&f, &exact_normal_flux(&u, n, &mat), 1e-12));
        }

        #[test]
        fn godunov_splitting_matches_exact_solver(mat in materials(), um in state(), up in state(), th in 0.0f64..6.3) {
            let n = [th.cos(), th.sin()];
            let (ap, am) = upwind_matrices(n, &mat).unwrap();
            let f = InterfaceSolver::new(n, &mat, &mat).unwrap().flux(&um, &up);
            let g: Vec<f64> = (0..NU).map(|i| (0..NU).map(|j| ap[i][j] * um[j] + am[i][j] * up[j]).sum()).collect();
            prop_assert!(close(&g, &f, 1e-10), "{:?} vs {:?}", g, f);
        }

        #[test]
        fn orientation_reciprocity(mm in materials(), mp in materials(), um in state(), up in state(), th in 0.0f64..6.3) {
            let n = [th.cos(), th.sin()];
            let a = InterfaceSolver::new(n, &mm, &mp).unwrap();
            let b = InterfaceSolver::new([-n[0], -n[1]], &mp, &mm).unwrap();
            let (va, ta) = a.star(&um, &up);
            let (vb, tb) = b.star(&up, &um);
            // traction flips with the normal, velocity does not
            let scale = 1.0 + ta.iter().chain(&va).fold(0.0f64, |m, v| m.max(v.abs()));
            for k in 0..2 {
                prop_assert!((va[k] - vb[k]).abs() <= 1e-12 * scale);
                prop_assert!((ta[k] + tb[k]).abs() <= 1e-12 * scale);
            }
            let fa = a.flux(&um, &up);
            let fb = b.flux(&up, &um);
            prop_assert!((fa[0] + fb[0]).abs() <= 1e-12 * scale && (fa[1] + fb[1]).abs() <= 1e-12 * scale);
        }

        #[test]
        fn matches_characteristic_oracle(mm in materials(), mp in materials(), um in state(), up in state(), th in 0.0f64..6.3) {
            let n = [th.cos(), th.sin()];
            let (v, t) = InterfaceSolver::new(n, &mm, &mp).unwrap().star(&um, &up);
            let (vo, to) = characteristic_star(n, &mm, &mp, &um, &up);
            let scale = 1.0 + to.iter().chain(&vo).fold(0.0f64, |m, v| m.max(v.abs()));
            for k in 0..2 {
                prop_assert!((v[k] - vo[k]).abs() <= 1e-10 * scale, "v {:?} vs {:?}", v, vo);
                prop_assert!((t[k] - to[k]).abs() <= 1e-10 * scale, "t {:?} vs {:?}", t, to);
            }
        }

        #[test]
        fn linearity(mm in materials(), mp in materials(), a in state(), b in state(), c in state(), d in state(), s in -2.0f64..2.0) {
            let n = [0.8, 0.6];
            let solver = InterfaceSolver::new(n, &mm, &mp).unwrap();
            let mut x = [0.0; NU];
            let mut y = [0.0; NU];
            for i in 0..NU { x[i] = a[i] + s * c[i]; y[i] = b[i] + s * d[i]; }
            let f = solver.flux(&x, &y);
            let f1 = solver.flux(&a, &b);
            let f2 = solver.flux(&c, &d);
            let scale = 1.0 + f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for i in 0..NU {
                prop_assert!((f[i] - f1[i] - s * f2[i]).abs() <= 1e-12 * scale);
            }
        }

        #[test]
        fn upwinding(mat in materials(), um in state(), up in state(), th in 0.0f64..6.3, amp in -1.0f64..1.0) {
            // Adding a wave that moves away from the face on the plus side
            // does not change the interface state.
            let n = [th.cos(), th.sin()];
            let solver = InterfaceSolver::new(n, &mat, &mat).unwrap();
            let base = solver.star(&um, &up);
            for mode in plane_wave_modes(n, &mat).unwrap().iter().filter(|m| m.omega > 0.0) {
                let mut p = up;
                for i in 0..NU { p[i] += amp * mode.u[i]; }
                let s = solver.star(&um, &p);
                for k in 0..2 {
                    prop_assert!((s.0[k] - base.0[k]).abs() <= 1e-11 * (1.0 + base.0[k].abs()));
                    prop_assert!((s.1[k] - base.1[k]).abs() <= 1e-11 * (1.0 + base.1[k].abs()) * mat.c[0][0].max(1.0));
                }
            }
        }
    }
}
