//! Constitutive model and finite-volume force assembly.
//!
//! Energy density per unit rest volume:
//!
//! ```text
//! Ψ = μ10 (I1 − 3) + μ01 (I2 − 3) − (2 μ10 + 4 μ01) ln J + κ/2 (ln J)²
//!   + Σ_fibers [ k_p max(λ − 1, 0)³ / 3 + a σ_max (λ − 1) ],   λ = |F a0|
//! ```
//!
//! The `ln J` correction makes the rest state stress free. Active stress is
//! linear in the activation `a`. When the smallest singular value of `F`
//! drops below `clamp_sv` (or the element inverts) the isotropic part is
//! evaluated at the clamped `F̂ = U diag(max(σ, clamp)) Vᵀ`.

use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use nalgebra::{Matrix3, SMatrix, SymmetricEigen};

use crate::anatomy::Muscle;
use crate::geometry::{shape_function_gradients, TetMesh, Vec3};
use crate::linalg::{CsrMatrix, TripletBuilder};

pub type Matrix9 = SMatrix<f64, 9, 9>;
pub type Matrix12 = SMatrix<f64, 12, 12>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaterialParams {
    pub mu10: f64,
    pub mu01: f64,
    pub kappa: f64,
    pub k_passive: f64,
    pub sigma_max: f64,
    pub clamp_sv: f64,
}

impl Default for MaterialParams {
    fn default() -> Self {
        Self {
            mu10: 30_000.0,
            mu01: 10_000.0,
            kappa: 60_000.0,
            k_passive: 8_000.0,
            sigma_max: 300_000.0,
            clamp_sv: 0.2,
        }
    }
}

impl MaterialParams {
    pub fn is_valid(&self) -> bool {
        [
            self.mu10,
            self.mu01,
            self.kappa,
            self.k_passive,
            self.sigma_max,
        ]
        .iter()
        .all(|v| v.is_finite() && *v >= 0.0)
            && self.clamp_sv > 0.0
            && self.clamp_sv < 1.0
    }
}

/// One fiber family acting on a tet: unit rest direction and its activation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiberState {
    pub direction: Vec3,
    pub activation: f64,
}

/// Stress at a deformation gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct StressEval {
    /// First Piola-Kirchhoff stress.
    pub p: Matrix3<f64>,
    /// `∂P_ab/∂F_cd` at row `3a+b`, column `3c+d`.
    pub dp_df: Matrix9,
    /// `∂P/∂a`, the active stress per unit activation.
    pub p_active_unit: Matrix3<f64>,
}

fn unit(k: usize) -> Matrix3<f64> {
    let mut m = Matrix3::zeros();
    m[(k / 3, k % 3)] = 1.0;
    m
}

/// Returns the `F` at which the isotropic terms are evaluated.
fn clamped_isotropic_f(params: &MaterialParams, f: &Matrix3<f64>) -> Matrix3<f64> {
    let det = f.determinant();
    // Cheap accept: all singular values comfortably above the clamp.
    if det > 0.0 {
        let c = f.transpose() * f;
        let eig = c.symmetric_eigenvalues();
        let min_sq = eig.min();
        if min_sq >= params.clamp_sv * params.clamp_sv {
            return *f;
        }
    }
    let svd = f.svd(true, true);
    let mut u = svd.u.unwrap();
    let mut v_t = svd.v_t.unwrap();
    let mut s = svd.singular_values;
    let k = s.imin();
    if u.determinant() < 0.0 {
        u.column_mut(k).neg_mut();
        s[k] = -s[k];
    }
    if v_t.determinant() < 0.0 {
        v_t.row_mut(k).neg_mut();
        s[k] = -s[k];
    }
    for i in 0..3 {
        s[i] = s[i].max(params.clamp_sv);
    }
    u * Matrix3::from_diagonal(&s) * v_t
}

struct Isotropic {
    f: Matrix3<f64>,
    f_inv_t: Matrix3<f64>,
    c: Matrix3<f64>,
    i1: f64,
    ln_j: f64,
}

impl Isotropic {
    fn new(f: Matrix3<f64>) -> Self {
        let j = f.determinant();
        let f_inv_t = f.try_inverse().unwrap_or_else(Matrix3::zeros).transpose();
        let c = f.transpose() * f;
        Self {
            f,
            f_inv_t,
            i1: c.trace(),
            c,
            ln_j: j.ln(),
        }
    }

    fn energy(&self, p: &MaterialParams) -> f64 {
        let i2 = 0.5 * (self.i1 * self.i1 - (self.c * self.c).trace());
        p.mu10 * (self.i1 - 3.0) + p.mu01 * (i2 - 3.0) - (2.0 * p.mu10 + 4.0 * p.mu01) * self.ln_j
            + 0.5 * p.kappa * self.ln_j * self.ln_j
    }

    fn stress(&self, p: &MaterialParams) -> Matrix3<f64> {
        let f = &self.f;
        let corr = 2.0 * p.mu10 + 4.0 * p.mu01;
        f * (2.0 * p.mu10)
            + (f * self.i1 - f * self.c) * (2.0 * p.mu01)
            + self.f_inv_t * (p.kappa * self.ln_j - corr)
    }

    fn differential(&self, p: &MaterialParams, df: &Matrix3<f64>) -> Matrix3<f64> {
        let f = &self.f;
        let corr = 2.0 * p.mu10 + 4.0 * p.mu01;
        let di1 = 2.0 * f.dot(df);
        let d_fc = df * self.c + f * df.transpose() * f + f * f.transpose() * df;
        let d_inv_t = -(self.f_inv_t * df.transpose() * self.f_inv_t);
        let d_ln_j = self.f_inv_t.dot(df);
        df * (2.0 * p.mu10)
            + (f * di1 + df * self.i1 - d_fc) * (2.0 * p.mu01)
            + d_inv_t * (p.kappa * self.ln_j - corr)
            + self.f_inv_t * (p.kappa * d_ln_j)
    }
}

/// Fiber stretch response `ψ(λ)` and its first two derivatives.
fn fiber_response(p: &MaterialParams, lambda: f64, activation: f64) -> (f64, f64, f64) {
    let e = (lambda - 1.0).max(0.0);
    (
        p.k_passive * e * e * e / 3.0 + activation * p.sigma_max * (lambda - 1.0),
        p.k_passive * e * e + activation * p.sigma_max,
        2.0 * p.k_passive * e,
    )
}

pub fn energy_density(params: &MaterialParams, f: &Matrix3<f64>, fibers: &[FiberState]) -> f64 {
    let iso = Isotropic::new(clamped_isotropic_f(params, f));
    let mut psi = iso.energy(params);
    for fib in fibers {
        let lambda = (f * fib.direction).norm();
        psi += fiber_response(params, lambda, fib.activation).0;
    }
    psi
}

pub fn first_piola(
    params: &MaterialParams,
    f: &Matrix3<f64>,
    fibers: &[FiberState],
) -> Matrix3<f64> {
    let iso = Isotropic::new(clamped_isotropic_f(params, f));
    let mut p = iso.stress(params);
    for fib in fibers {
        let q = f * fib.direction;
        let lambda = q.norm();
        if lambda > 1e-12 {
            let (_, d1, _) = fiber_response(params, lambda, fib.activation);
            p += q * fib.direction.transpose() * (d1 / lambda);
        }
    }
    p
}

/// `∂P/∂F` as a 9×9 matrix.
pub fn stress_derivative(
    params: &MaterialParams,
    f: &Matrix3<f64>,
    fibers: &[FiberState],
) -> Matrix9 {
    let iso = Isotropic::new(clamped_isotropic_f(params, f));
    let mut h = Matrix9::zeros();
    for k in 0..9 {
        let df = unit(k);
        let mut dp = iso.differential(params, &df);
        for fib in fibers {
            let q = f * fib.direction;
            let lambda = q.norm();
            if lambda > 1e-12 {
                let (_, d1, d2) = fiber_response(params, lambda, fib.activation);
                let dq = df * fib.direction;
                let dl = q.dot(&dq) / lambda;
                let dv = q * ((d2 / lambda - d1 / (lambda * lambda)) * dl) + dq * (d1 / lambda);
                dp += dv * fib.direction.transpose();
            }
        }
        for r in 0..9 {
            h[(r, k)] = dp[(r / 3, r % 3)];
        }
    }
    h
}

/// Active stress per unit activation, `σ_max (F a0) a0ᵀ / λ`.
pub fn active_unit_stress(params: &MaterialParams, f: &Matrix3<f64>, a0: &Vec3) -> Matrix3<f64> {
    let q = f * a0;
    let lambda = q.norm();
    if lambda > 1e-12 {
        q * a0.transpose() * (params.sigma_max / lambda)
    } else {
        Matrix3::zeros()
    }
}

/// Single-fiber stress evaluation with its derivatives.
pub fn stress(params: &MaterialParams, f: &Matrix3<f64>, a: f64, a0: &Vec3) -> StressEval {
    let fibers = [FiberState {
        direction: *a0,
        activation: a,
    }];
    StressEval {
        p: first_piola(params, f, &fibers),
        dp_df: stress_derivative(params, f, &fibers),
        p_active_unit: active_unit_stress(params, f, a0),
    }
}

/// Per-tet list of `(muscle index, unit fiber direction)` memberships.
pub fn fiber_table(num_tets: usize, muscles: &[Muscle]) -> Vec<Vec<(usize, Vec3)>> {
    let mut table = vec![Vec::new(); num_tets];
    for (m, muscle) in muscles.iter().enumerate() {
        for (&t, a0) in muscle.tets.iter().zip(&muscle.fibers) {
            table[t].push((m, *a0));
        }
    }
    table
}

/// Flesh mesh plus constitutive data, ready for repeated force evaluation.
#[derive(Debug, Clone)]
pub struct ElasticBody<'a> {
    pub mesh: &'a TetMesh,
    pub params: MaterialParams,
    fibers: Vec<Vec<(usize, Vec3)>>,
    gradients: Vec<[Vec3; 4]>,
}

impl<'a> ElasticBody<'a> {
    pub fn new(mesh: &'a TetMesh, params: MaterialParams, muscles: &[Muscle]) -> Self {
        Self {
            mesh,
            params,
            fibers: fiber_table(mesh.tets().len(), muscles),
            gradients: mesh
                .rest_shape_inverse()
                .iter()
                .map(shape_function_gradients)
                .collect(),
        }
    }

    fn tet_fibers(&self, t: usize, activations: &[f64]) -> Vec<FiberState> {
        self.fibers[t]
            .iter()
            .map(|&(m, d)| FiberState {
                direction: d,
                activation: activations[m],
            })
            .collect()
    }

    #[inline]
    fn def_grad(&self, positions: &[Vec3], t: usize) -> Matrix3<f64> {
        let tet = &self.mesh.tets()[t];
        let g = &self.gradients[t];
        let mut f = Matrix3::zeros();
        for k in 0..4 {
            f += positions[tet[k]] * g[k].transpose();
        }
        f
    }

    pub fn energy(&self, positions: &[Vec3], activations: &[f64]) -> f64 {
        (0..self.mesh.tets().len())
            .map(|t| {
                let f = self.def_grad(positions, t);
                self.mesh.rest_volumes()[t]
                    * energy_density(&self.params, &f, &self.tet_fibers(t, activations))
            })
            .sum()
    }

    /// True when every tet keeps positive volume at `positions`.
    pub fn is_uninverted(&self, positions: &[Vec3]) -> bool {
        (0..self.mesh.tets().len()).all(|t| self.def_grad(positions, t).determinant() > 0.0)
    }

    /// Nodal forces `−∂E/∂x` for every mesh vertex.
    pub fn forces(&self, positions: &[Vec3], activations: &[f64]) -> Vec<Vec3> {
        let mut out = vec![Vec3::zeros(); positions.len()];
        for (t, tet) in self.mesh.tets().iter().enumerate() {
            let f = self.def_grad(positions, t);
            let p = first_piola(&self.params, &f, &self.tet_fibers(t, activations));
            let v0 = self.mesh.rest_volumes()[t];
            for k in 0..4 {
                out[tet[k]] -= p * self.gradients[t][k] * v0;
            }
        }
        out
    }

    /// Force contribution of one muscle per unit activation, `∂f/∂a_m`.
    pub fn active_unit_forces(&self, positions: &[Vec3], muscle: &Muscle) -> Vec<Vec3> {
        let mut out = vec![Vec3::zeros(); positions.len()];
        for (&t, a0) in muscle.tets.iter().zip(&muscle.fibers) {
            let tet = &self.mesh.tets()[t];
            let f = self.def_grad(positions, t);
            let p = active_unit_stress(&self.params, &f, a0);
            let v0 = self.mesh.rest_volumes()[t];
            for k in 0..4 {
                out[tet[k]] -= p * self.gradients[t][k] * v0;
            }
        }
        out
    }

    /// 12×12 element block of `∂f/∂x` for tet `t`.
    pub fn element_jacobian(
        &self,
        positions: &[Vec3],
        activations: &[f64],
        t: usize,
        projection: bool,
    ) -> Matrix12 {
        let f = self.def_grad(positions, t);
        let h = stress_derivative(&self.params, &f, &self.tet_fibers(t, activations));
        let g = &self.gradients[t];
        let v0 = self.mesh.rest_volumes()[t];
        // stiffness = −∂f/∂x = V0 Bᵀ H B with B[(3a+b),(3i+c)] = δ_ac g_i[b].
        let mut b = SMatrix::<f64, 9, 12>::zeros();
        for i in 0..4 {
            for a in 0..3 {
                for bb in 0..3 {
                    b[(3 * a + bb, 3 * i + a)] = g[i][bb];
                }
            }
        }
        let mut stiff: Matrix12 = b.transpose() * h * b * v0;
        stiff = (stiff + stiff.transpose()) * 0.5;
        if projection {
            stiff = project_psd(&stiff);
        }
        -stiff
    }

    /// Assembled `∂f/∂x` over all vertices (`3n × 3n`).
    pub fn force_jacobian(
        &self,
        positions: &[Vec3],
        activations: &[f64],
        projection: bool,
    ) -> CsrMatrix {
        let n = positions.len();
        let mut trip = TripletBuilder::with_capacity(3 * n, 3 * n, 144 * self.mesh.tets().len());
        for (t, tet) in self.mesh.tets().iter().enumerate() {
            let k = self.element_jacobian(positions, activations, t, projection);
            for i in 0..4 {
                for j in 0..4 {
                    for a in 0..3 {
                        for c in 0..3 {
                            trip.push(3 * tet[i] + a, 3 * tet[j] + c, k[(3 * i + a, 3 * j + c)]);
                        }
                    }
                }
            }
        }
        trip.build()
    }
}

/// Clamps negative eigenvalues of a symmetric 12×12 matrix to zero.
pub fn project_psd(m: &Matrix12) -> Matrix12 {
    let eig = SymmetricEigen::new(*m);
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return *m;
    }
    let clamped = eig.eigenvalues.map(|l| l.max(0.0));
    eig.eigenvectors * Matrix12::from_diagonal(&clamped) * eig.eigenvectors.transpose()
}

/// Finite-volume nodal forces for the flesh mesh.
pub fn fvm_forces(
    flesh: &TetMesh,
    params: &MaterialParams,
    positions: &[Vec3],
    muscles: &[Muscle],
    activations: &[f64],
) -> Vec<Vec3> {
    ElasticBody::new(flesh, *params, muscles).forces(positions, activations)
}

/// Total elastic energy of the flesh mesh.
pub fn elastic_energy(
    flesh: &TetMesh,
    params: &MaterialParams,
    positions: &[Vec3],
    muscles: &[Muscle],
    activations: &[f64],
) -> f64 {
    ElasticBody::new(flesh, *params, muscles).energy(positions, activations)
}

/// `∂f/∂x` assembled over the flesh mesh, optionally with per-tet
/// definiteness projection.
pub fn force_jacobian(
    flesh: &TetMesh,
    params: &MaterialParams,
    positions: &[Vec3],
    muscles: &[Muscle],
    activations: &[f64],
    projection: bool,
) -> CsrMatrix {
    ElasticBody::new(flesh, *params, muscles).force_jacobian(positions, activations, projection)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotation::euler_xyz;
    use proptest::prelude::*;

    fn params() -> MaterialParams {
        MaterialParams::default()
    }

    fn fiber(a: f64) -> [FiberState; 1] {
        [FiberState {
            direction: Vec3::new(1.0, 2.0, -0.5).normalize(),
            activation: a,
        }]
    }

    fn near_identity(seed: [f64; 9], scale: f64) -> Matrix3<f64> {
        Matrix3::identity() + Matrix3::from_row_slice(&seed) * scale
    }

    #[test]
    fn rest_is_stress_free() {
        let p = first_piola(&params(), &Matrix3::identity(), &fiber(0.0));
        assert!(p.norm() < 1e-12);
    }

    #[test]
    fn unit_activation_at_rest_is_uniaxial() {
        let a0 = Vec3::x();
        let s = stress(&params(), &Matrix3::identity(), 0.5, &a0);
        let expected = Vec3::x() * Vec3::x().transpose() * (0.5 * params().sigma_max);
        assert!((s.p - expected).norm() < 1e-9);
    }

    #[test]
    fn stress_matches_energy_finite_differences() {
        let f = near_identity(
            [0.05, -0.02, 0.03, 0.01, 0.08, -0.04, 0.02, 0.03, -0.06],
            1.0,
        );
        let fib = fiber(0.4);
        let p = first_piola(&params(), &f, &fib);
        let h = 1e-6;
        let mut fd = Matrix3::zeros();
        for k in 0..9 {
            let e = unit(k) * h;
            fd[(k / 3, k % 3)] = (energy_density(&params(), &(f + e), &fib)
                - energy_density(&params(), &(f - e), &fib))
                / (2.0 * h);
        }
        assert!((fd - p).norm() / p.norm() < 1e-6);
    }

    #[test]
    fn stress_derivative_matches_finite_differences() {
        let f = near_identity([0.1, -0.05, 0.0, 0.04, 0.15, -0.03, 0.0, 0.06, -0.1], 1.0);
        // Stretch the fiber so the passive term is active.
        let fib = [FiberState {
            direction: Vec3::new(0.0, 1.0, 0.0),
            activation: 0.7,
        }];
        let h = stress_derivative(&params(), &f, &fib);
        let step = 1e-6;
        let mut fd = Matrix9::zeros();
        for k in 0..9 {
            let e = unit(k) * step;
            let dp = (first_piola(&params(), &(f + e), &fib)
                - first_piola(&params(), &(f - e), &fib))
                / (2.0 * step);
            for r in 0..9 {
                fd[(r, k)] = dp[(r / 3, r % 3)];
            }
        }
        assert!((fd - h).norm() / h.norm() < 1e-7);
    }

    #[test]
    fn clamped_region_stays_finite_for_inverted_elements() {
        let f = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, -0.3));
        let p = first_piola(&params(), &f, &fiber(0.2));
        assert!(p.iter().all(|v| v.is_finite()));
        let h = stress_derivative(&params(), &f, &fiber(0.2));
        assert!(h.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn projection_makes_blocks_semidefinite() {
        let mut m = Matrix12::identity();
        m[(0, 0)] = -3.0;
        m[(0, 5)] = 0.5;
        m[(5, 0)] = 0.5;
        let p = project_psd(&m);
        assert!(SymmetricEigen::new(p).eigenvalues.min() > -1e-12);
    }

    fn perturbed(mesh: &TetMesh, amp: f64) -> Vec<Vec3> {
        mesh.vertices()
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let s = i as f64;
                p + Vec3::new(
                    (1.3 * s).sin(),
                    (2.1 * s + 0.4).cos(),
                    (0.7 * s + 1.1).sin(),
                ) * amp
            })
            .collect()
    }

    fn body_fixture() -> (crate::anatomy::tests::Fixture, Vec<f64>) {
        (crate::anatomy::tests::fixture(), vec![0.6])
    }

    #[test]
    fn rest_forces_vanish() {
        let (f, _) = body_fixture();
        let body = ElasticBody::new(&f.flesh, params(), &f.muscles);
        let forces = body.forces(f.flesh.vertices(), &[0.0]);
        assert!(forces.iter().all(|v| v.norm() < 1e-12));
    }

    #[test]
    fn forces_sum_to_zero() {
        let (f, act) = body_fixture();
        let x = perturbed(&f.flesh, 0.002);
        let forces = fvm_forces(&f.flesh, &params(), &x, &f.muscles, &act);
        let total: Vec3 = forces.iter().sum();
        let scale: f64 = forces.iter().map(|v| v.norm()).sum();
        assert!(total.norm() < 1e-9 * scale);
    }

    #[test]
    fn forces_match_energy_gradient() {
        let (f, act) = body_fixture();
        let x = perturbed(&f.flesh, 0.002);
        let forces = fvm_forces(&f.flesh, &params(), &x, &f.muscles, &act);
        let step = 1e-7;
        let mut err = 0.0f64;
        let mut norm = 0.0f64;
        for v in 0..x.len() {
            for a in 0..3 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[v][a] += step;
                xm[v][a] -= step;
                let fd = -(elastic_energy(&f.flesh, &params(), &xp, &f.muscles, &act)
                    - elastic_energy(&f.flesh, &params(), &xm, &f.muscles, &act))
                    / (2.0 * step);
                err += (fd - forces[v][a]).powi(2);
                norm += forces[v][a].powi(2);
            }
        }
        assert!(err.sqrt() / norm.sqrt() < 1e-5);
    }

    #[test]
    fn jacobian_matches_force_differences_and_is_symmetric() {
        let (f, act) = body_fixture();
        let x = perturbed(&f.flesh, 0.002);
        let jac = force_jacobian(&f.flesh, &params(), &x, &f.muscles, &act, false);
        assert!(jac.asymmetry() < 1e-10 * jac.norm());
        let dense = jac.to_dense();
        let step = 1e-7;
        let mut err = 0.0f64;
        for v in 0..x.len() {
            for a in 0..3 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[v][a] += step;
                xm[v][a] -= step;
                let fp = fvm_forces(&f.flesh, &params(), &xp, &f.muscles, &act);
                let fm = fvm_forces(&f.flesh, &params(), &xm, &f.muscles, &act);
                for w in 0..x.len() {
                    for c in 0..3 {
                        let fd = (fp[w][c] - fm[w][c]) / (2.0 * step);
                        err += (fd - dense[3 * w + c][3 * v + a]).powi(2);
                    }
                }
            }
        }
        assert!(err.sqrt() / jac.norm() < 1e-4);
    }

    #[test]
    fn rest_stiffness_is_semidefinite() {
        let (f, _) = body_fixture();
        let jac = force_jacobian(
            &f.flesh,
            &params(),
            f.flesh.vertices(),
            &f.muscles,
            &[0.0],
            false,
        );
        for seed in 0..8 {
            let x: Vec<f64> = (0..jac.rows())
                .map(|i| ((i * 7 + seed * 13) as f64 * 0.37).sin())
                .collect();
            assert!(-jac.quadratic_form(&x) >= -1e-10);
        }
    }

    #[test]
    fn projected_jacobian_is_semidefinite_under_compression() {
        let (f, act) = body_fixture();
        let x: Vec<Vec3> = perturbed(&f.flesh, 0.004)
            .iter()
            .map(|p| Vec3::new(p.x * 0.6, p.y, p.z * 0.5))
            .collect();
        let jac = force_jacobian(&f.flesh, &params(), &x, &f.muscles, &act, true);
        for seed in 0..8 {
            let v: Vec<f64> = (0..jac.rows())
                .map(|i| ((i * 11 + seed * 5) as f64 * 0.91).cos())
                .collect();
            assert!(-jac.quadratic_form(&v) >= -1e-10 * jac.norm());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn rest_stress_free_for_any_parameters(
            mu10 in 0.0f64..1e5, mu01 in 0.0f64..1e5, kappa in 0.0f64..1e6, kp in 0.0f64..1e5,
        ) {
            let p = MaterialParams { mu10, mu01, kappa, k_passive: kp, ..MaterialParams::default() };
            prop_assert!(first_piola(&p, &Matrix3::identity(), &fiber(0.0)).norm() < 1e-12);
        }

        #[test]
        fn active_stress_is_linear_in_activation(
            seed in proptest::array::uniform9(-1.0f64..1.0), a in 0.0f64..1.0,
        ) {
            let f = near_identity(seed, 0.2);
            let a0 = fiber(0.0)[0].direction;
            let s = stress(&params(), &f, a, &a0);
            let p0 = stress(&params(), &f, 0.0, &a0).p;
            let diff = s.p - p0 - s.p_active_unit * a;
            prop_assert!(diff.norm() <= 1e-9 * s.p.norm().max(1.0));
        }

        #[test]
        fn stress_is_objective(
            seed in proptest::array::uniform9(-1.0f64..1.0),
            angles in proptest::array::uniform3(-3.0f64..3.0),
            a in 0.0f64..1.0,
        ) {
            let f = near_identity(seed, 0.25);
            let r = euler_xyz(&Vec3::new(angles[0], angles[1], angles[2]));
            let fib = fiber(a);
            let p = first_piola(&params(), &f, &fib);
            let pr = first_piola(&params(), &(r * f), &fib);
            prop_assert!((pr - r * p).norm() <= 1e-10 * p.norm().max(1.0));
        }
    }
}
