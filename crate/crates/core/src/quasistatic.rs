//! Newton-Raphson solve of `f_fvm + f_collisions + f_tracks = 0` over the
//! unconstrained flesh vertices.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::anatomy::{curve_length, Anatomy, AnatomyError, PrecomputedMuscleBasis};
use crate::geometry::Vec3;
use crate::linalg::{norm2, norm_inf, CsrMatrix, EnvelopeCholesky, LinalgError, TripletBuilder};
use crate::material::ElasticBody;
use crate::rig::{JawParams, JAW_DOF};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuasistaticError {
    #[error(transparent)]
    Anatomy(#[from] AnatomyError),
    #[error("{got} activations for {expected} muscles")]
    ActivationCount { expected: usize, got: usize },
    #[error("{got} positions for {expected} vertices")]
    PositionCount { expected: usize, got: usize },
    #[error("invalid material parameters")]
    InvalidMaterial,
    #[error("linear solve failed: {0}")]
    Linear(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Convergence {
    Converged,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveSettings {
    /// Residual tolerance as a multiple of the characteristic force.
    pub relative_tolerance: f64,
    pub max_iterations: usize,
    pub linear_tolerance: f64,
    pub backtrack: f64,
    pub max_halvings: usize,
}

impl Default for SolveSettings {
    fn default() -> Self {
        Self {
            relative_tolerance: 1e-6,
            max_iterations: 50,
            linear_tolerance: 1e-8,
            backtrack: 0.5,
            max_halvings: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumState {
    /// Every flesh vertex; constrained entries hold the kinematic positions.
    pub positions: Vec<Vec3>,
    pub b: Vec<f64>,
    pub j: JawParams,
    pub activations: Vec<f64>,
    /// `da_m/dL_m` at the current curve lengths.
    pub activation_slopes: Vec<f64>,
    pub lengths: Vec<f64>,
    /// `‖f_total‖∞` over the unconstrained vertices.
    pub residual: f64,
    pub tolerance: f64,
    pub iterations: usize,
    pub status: Convergence,
    /// Whether any step fell back to the definiteness-projected system.
    pub used_projection: bool,
}

impl EquilibriumState {
    pub fn is_converged(&self) -> bool {
        self.status == Convergence::Converged
    }

    pub fn gather(&self, vertices: &[usize]) -> Vec<Vec3> {
        vertices.iter().map(|&v| self.positions[v]).collect()
    }
}

/// Reusable solver context for one anatomy and basis.
#[derive(Debug, Clone)]
pub struct Simulator<'a> {
    pub anatomy: &'a Anatomy,
    pub basis: &'a PrecomputedMuscleBasis,
    pub body: ElasticBody<'a>,
    pub settings: SolveSettings,
    unconstrained: Vec<usize>,
    /// Vertex → index into `unconstrained`, or `usize::MAX`.
    dof: Vec<usize>,
    /// Vertex → index into `anatomy.constrained`, or `usize::MAX`.
    kinematic: Vec<usize>,
    characteristic_force: f64,
}

/// Mean nodal force magnitude under a 1% uniform compression of the rest mesh.
pub fn characteristic_force(body: &ElasticBody<'_>, num_muscles: usize) -> f64 {
    let rest = body.mesh.vertices();
    let c: Vec3 = rest.iter().sum::<Vec3>() / rest.len() as f64;
    let squeezed: Vec<Vec3> = rest.iter().map(|p| c + (p - c) * 0.99).collect();
    let f = body.forces(&squeezed, &vec![0.0; num_muscles]);
    f.iter().map(|v| v.norm()).sum::<f64>() / f.len() as f64
}

impl<'a> Simulator<'a> {
    pub fn new(
        anatomy: &'a Anatomy,
        basis: &'a PrecomputedMuscleBasis,
        settings: SolveSettings,
    ) -> Result<Self, QuasistaticError> {
        if !anatomy.material.is_valid() {
            return Err(QuasistaticError::InvalidMaterial);
        }
        let n = anatomy.flesh.num_vertices();
        let unconstrained = anatomy.unconstrained();
        let mut dof = vec![usize::MAX; n];
        for (i, &v) in unconstrained.iter().enumerate() {
            dof[v] = i;
        }
        let mut kinematic = vec![usize::MAX; n];
        for (i, &v) in anatomy.constrained.iter().enumerate() {
            kinematic[v] = i;
        }
        let body = ElasticBody::new(&anatomy.flesh, anatomy.material, &anatomy.muscles);
        let characteristic_force = characteristic_force(&body, anatomy.muscles.len());
        Ok(Self {
            anatomy,
            basis,
            body,
            settings,
            unconstrained,
            dof,
            kinematic,
            characteristic_force,
        })
    }

    pub fn unconstrained(&self) -> &[usize] {
        &self.unconstrained
    }

    pub fn constrained(&self) -> &[usize] {
        &self.anatomy.constrained
    }

    pub fn dof_index(&self, vertex: usize) -> Option<usize> {
        match self.dof[vertex] {
            usize::MAX => None,
            i => Some(i),
        }
    }

    pub fn characteristic_force(&self) -> f64 {
        self.characteristic_force
    }

    pub fn tolerance(&self) -> f64 {
        self.settings.relative_tolerance * self.characteristic_force
    }

    /// `X^C(j)`, ordered like `anatomy.constrained`.
    pub fn constrained_positions(&self, j: &JawParams) -> Vec<Vec3> {
        constrained_positions(self.anatomy, self.basis, j)
    }

    /// `∂X^C/∂j_p` as `cols[p][constrained index]`.
    pub fn constrained_jaw_derivatives(&self, j: &JawParams) -> Vec<Vec<Vec3>> {
        let t = self.basis.jaw.transform(j);
        let mut cols = vec![vec![Vec3::zeros(); self.anatomy.constrained.len()]; JAW_DOF];
        for (i, &v) in self.anatomy.constrained.iter().enumerate() {
            let d = t.param_derivatives(
                self.basis.flesh_weights[v],
                &self.anatomy.flesh.vertices()[v],
            );
            for p in 0..JAW_DOF {
                cols[p][i] = d[p];
            }
        }
        cols
    }

    /// Total force at every vertex (constrained entries included).
    pub fn total_forces(
        &self,
        positions: &[Vec3],
        activations: &[f64],
        targets: &[Vec<Vec3>],
    ) -> Vec<Vec3> {
        let mut f = self.body.forces(positions, activations);
        for &v in &self.unconstrained {
            for proxy in &self.anatomy.proxies {
                f[v] += proxy.force(&positions[v]);
            }
        }
        for (t, m) in track_forces(&self.anatomy.muscles, targets, positions)
            .into_iter()
            .zip(f.iter_mut())
        {
            *m += t;
        }
        f
    }

    /// Flattened total force over the unconstrained vertices.
    pub fn residual(
        &self,
        positions: &[Vec3],
        activations: &[f64],
        targets: &[Vec<Vec3>],
    ) -> Vec<f64> {
        let f = self.total_forces(positions, activations, targets);
        let mut r = Vec::with_capacity(3 * self.unconstrained.len());
        for &v in &self.unconstrained {
            r.extend_from_slice(f[v].as_slice());
        }
        r
    }

    /// Total potential energy whose negative gradient is [`Self::total_forces`].
    pub fn total_energy(
        &self,
        positions: &[Vec3],
        activations: &[f64],
        targets: &[Vec<Vec3>],
    ) -> f64 {
        let mut e = self.body.energy(positions, activations);
        for &v in &self.unconstrained {
            for proxy in &self.anatomy.proxies {
                e += proxy.energy(&positions[v]);
            }
        }
        for (muscle, target) in self.anatomy.muscles.iter().zip(targets) {
            for (&v, t) in muscle.vertices.iter().zip(target) {
                e += 0.5 * muscle.stiffness * (positions[v] - t).norm_squared();
            }
        }
        e
    }

    /// `(A, K_UC)` with `A = −∂f_U/∂X_U` (track stiffness and collisions
    /// included) and `K_UC = ∂f_U/∂X_C`.
    pub fn linearize(
        &self,
        positions: &[Vec3],
        activations: &[f64],
        projection: bool,
    ) -> (CsrMatrix, CsrMatrix) {
        let nu = 3 * self.unconstrained.len();
        let nc = 3 * self.anatomy.constrained.len();
        let tets = self.anatomy.flesh.tets();
        let mut a = TripletBuilder::with_capacity(nu, nu, 144 * tets.len() + nu);
        let mut kuc = TripletBuilder::new(nu, nc);
        for (t, tet) in tets.iter().enumerate() {
            let k = self
                .body
                .element_jacobian(positions, activations, t, projection);
            for i in 0..4 {
                let Some(row) = self.dof_index(tet[i]) else {
                    continue;
                };
                for jn in 0..4 {
                    let (col, is_free) = match self.dof_index(tet[jn]) {
                        Some(c) => (c, true),
                        None => (self.kinematic[tet[jn]], false),
                    };
                    for r in 0..3 {
                        for c in 0..3 {
                            let v = k[(3 * i + r, 3 * jn + c)];
                            if is_free {
                                a.push(3 * row + r, 3 * col + c, -v);
                            } else {
                                kuc.push(3 * row + r, 3 * col + c, v);
                            }
                        }
                    }
                }
            }
        }
        for (i, &v) in self.unconstrained.iter().enumerate() {
            for proxy in &self.anatomy.proxies {
                let jac = proxy.force_jacobian(&positions[v], projection);
                a.push_block3(i, i, &(-jac));
            }
        }
        for muscle in &self.anatomy.muscles {
            for &v in &muscle.vertices {
                let i = self.dof[v];
                for r in 0..3 {
                    a.push(3 * i + r, 3 * i + r, muscle.stiffness);
                }
            }
        }
        (a.build(), kuc.build())
    }

    /// Cold start: the skinned harmonic morph with kinematic constrained vertices.
    pub fn initial_guess(&self, b: &[f64], j: &JawParams) -> Vec<Vec3> {
        let mut x = self.basis.morph(b, j);
        for (&v, p) in self
            .anatomy
            .constrained
            .iter()
            .zip(self.constrained_positions(j))
        {
            x[v] = p;
        }
        x
    }

    /// Computes activations from the curve lengths, then solves.
    pub fn solve(
        &self,
        b: &[f64],
        j: &JawParams,
        warm_start: Option<&[Vec3]>,
    ) -> Result<EquilibriumState, QuasistaticError> {
        self.basis.check_shapes(b)?;
        let mut activations = Vec::new();
        let mut slopes = Vec::new();
        let mut lengths = Vec::new();
        for (m, muscle) in self.anatomy.muscles.iter().enumerate() {
            let l = curve_length(&self.basis.curve(m, b, j));
            let (a, da) = muscle.activation_curve().evaluate(l);
            activations.push(a);
            slopes.push(da);
            lengths.push(l);
        }
        let mut state = self.solve_with_activations(b, j, &activations, warm_start)?;
        state.activation_slopes = slopes;
        state.lengths = lengths;
        Ok(state)
    }

    /// Solves with explicitly given activations (curve lengths are ignored).
    pub fn solve_with_activations(
        &self,
        b: &[f64],
        j: &JawParams,
        activations: &[f64],
        warm_start: Option<&[Vec3]>,
    ) -> Result<EquilibriumState, QuasistaticError> {
        self.basis.check_shapes(b)?;
        let nm = self.anatomy.muscles.len();
        if activations.len() != nm {
            return Err(QuasistaticError::ActivationCount {
                expected: nm,
                got: activations.len(),
            });
        }
        let n = self.anatomy.flesh.num_vertices();
        let mut x = match warm_start {
            Some(w) if w.len() != n => {
                return Err(QuasistaticError::PositionCount {
                    expected: n,
                    got: w.len(),
                })
            }
            Some(w) => {
                let mut x = w.to_vec();
                for (&v, p) in self
                    .anatomy
                    .constrained
                    .iter()
                    .zip(self.constrained_positions(j))
                {
                    x[v] = p;
                }
                x
            }
            None => self.initial_guess(b, j),
        };
        let targets: Vec<Vec<Vec3>> = (0..nm).map(|m| self.basis.targets(m, b, j)).collect();
        let tol = self.tolerance();
        let mut r = self.residual(&x, activations, &targets);
        let mut iterations = 0;
        let mut used_projection = false;
        let mut status = Convergence::MaxIterations;
        loop {
            if norm_inf(&r) < tol {
                status = Convergence::Converged;
                break;
            }
            if iterations == self.settings.max_iterations {
                break;
            }
            iterations += 1;
            let mut accepted = None;
            for projection in [false, true] {
                let (a, _) = self.linearize(&x, activations, projection);
                let Ok(factor) = EnvelopeCholesky::factor(&a) else {
                    continue;
                };
                let dx = factor.solve(&r);
                if let Some(step) = self.line_search(&x, &r, &dx, activations, &targets) {
                    used_projection |= projection;
                    accepted = Some(step);
                    break;
                }
            }
            match accepted {
                Some((xn, rn)) => {
                    x = xn;
                    r = rn;
                }
                None => {
                    status = Convergence::LineSearchFailed;
                    break;
                }
            }
        }
        Ok(EquilibriumState {
            positions: x,
            b: b.to_vec(),
            j: *j,
            activations: activations.to_vec(),
            activation_slopes: vec![0.0; nm],
            lengths: vec![0.0; nm],
            residual: norm_inf(&r),
            tolerance: tol,
            iterations,
            status,
            used_projection,
        })
    }

    fn line_search(
        &self,
        x: &[Vec3],
        r: &[f64],
        dx: &[f64],
        activations: &[f64],
        targets: &[Vec<Vec3>],
    ) -> Option<(Vec<Vec3>, Vec<f64>)> {
        let r0 = norm2(r);
        let mut alpha = 1.0;
        for _ in 0..=self.settings.max_halvings {
            let mut xn = x.to_vec();
            for (i, &v) in self.unconstrained.iter().enumerate() {
                xn[v] += Vec3::new(dx[3 * i], dx[3 * i + 1], dx[3 * i + 2]) * alpha;
            }
            let rn = self.residual(&xn, activations, targets);
            let r1 = norm2(&rn);
            if r1.is_finite() && r1 < r0 {
                return Some((xn, rn));
            }
            alpha *= self.settings.backtrack;
        }
        None
    }
}

/// Applies the jaw skin transform (volumetric weights) to the constrained rest
/// positions, in `anatomy.constrained` order.
pub fn constrained_positions(
    anatomy: &Anatomy,
    basis: &PrecomputedMuscleBasis,
    j: &JawParams,
) -> Vec<Vec3> {
    let rest = anatomy.flesh.vertices();
    if j.is_zero() {
        return anatomy.constrained.iter().map(|&v| rest[v]).collect();
    }
    let t = basis.jaw.transform(j);
    anatomy
        .constrained
        .iter()
        .map(|&v| t.apply(basis.flesh_weights[v], &rest[v]))
        .collect()
}

/// `k_m (M_m − I_m X)` scattered to every flesh vertex.
pub fn track_forces(
    muscles: &[crate::anatomy::Muscle],
    targets: &[Vec<Vec3>],
    positions: &[Vec3],
) -> Vec<Vec3> {
    let mut f = vec![Vec3::zeros(); positions.len()];
    for (muscle, target) in muscles.iter().zip(targets) {
        for (&v, t) in muscle.vertices.iter().zip(target) {
            f[v] += (t - positions[v]) * muscle.stiffness;
        }
    }
    f
}

/// One-shot solve at `(b, j)`.
pub fn solve_equilibrium(
    anatomy: &Anatomy,
    basis: &PrecomputedMuscleBasis,
    b: &[f64],
    j: &JawParams,
    settings: SolveSettings,
    warm_start: Option<&[Vec3]>,
) -> Result<EquilibriumState, QuasistaticError> {
    Simulator::new(anatomy, basis, settings)?.solve(b, j, warm_start)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::anatomy::precompute_basis;
    use crate::anatomy::tests::fixture;
    use crate::geometry::CollisionProxy;
    use crate::material::MaterialParams;

    pub(crate) fn anatomy_fixture(stiffness: f64) -> (Anatomy, PrecomputedMuscleBasis) {
        let mut f = fixture();
        f.muscles[0].stiffness = stiffness;
        let basis = precompute_basis(&f.flesh, &f.rig, &f.muscles, &f.laplacian).unwrap();
        let constrained = f.flesh.inner_boundary().to_vec();
        let anatomy = Anatomy {
            surface_to_flesh: f.flesh.boundary().to_vec(),
            flesh: f.flesh,
            muscles: f.muscles,
            material: MaterialParams::default(),
            proxies: Vec::new(),
            constrained,
        };
        (anatomy, basis)
    }

    #[test]
    fn constrained_positions_follow_the_jaw() {
        let (mut anatomy, mut basis) = anatomy_fixture(100.0);
        anatomy.constrained.sort_unstable();
        let rest: Vec<Vec3> = anatomy
            .constrained
            .iter()
            .map(|&v| anatomy.flesh.vertices()[v])
            .collect();
        assert_eq!(
            constrained_positions(&anatomy, &basis, &JawParams::default()),
            rest
        );
        let j = JawParams([0.0, 0.0, 0.0, 0.01, -0.02, 0.005]);
        basis.flesh_weights.iter_mut().for_each(|w| *w = 1.0);
        let moved = constrained_positions(&anatomy, &basis, &j);
        for (m, r) in moved.iter().zip(&rest) {
            assert!((m - (r + j.translation())).norm() < 1e-15);
        }
        basis.flesh_weights.iter_mut().for_each(|w| *w = 0.0);
        let j = JawParams([0.3, -0.2, 0.1, 0.01, -0.02, 0.005]);
        assert_eq!(constrained_positions(&anatomy, &basis, &j), rest);
    }

    #[test]
    fn track_force_spring_law() {
        let (anatomy, _) = anatomy_fixture(10.0);
        let m = &anatomy.muscles[0];
        let mut x = anatomy.flesh.vertices().to_vec();
        let targets = vec![m.vertices.iter().map(|&v| x[v]).collect::<Vec<_>>()];
        let f = track_forces(&anatomy.muscles, &targets, &x);
        assert!(f.iter().all(|v| *v == Vec3::zeros()));
        let v0 = m.vertices[0];
        x[v0] += Vec3::x();
        let f = track_forces(&anatomy.muscles, &targets, &x);
        assert!((f[v0] - Vec3::new(-10.0, 0.0, 0.0)).norm() < 1e-12);
        let mut doubled = anatomy.muscles.clone();
        doubled[0].stiffness *= 2.0;
        let f2 = track_forces(&doubled, &targets, &x);
        assert!((f2[v0] - f[v0] * 2.0).norm() < 1e-12);
    }

    #[test]
    fn rest_is_equilibrium_in_zero_iterations() {
        let (anatomy, basis) = anatomy_fixture(100.0);
        let state = solve_equilibrium(
            &anatomy,
            &basis,
            &[0.0, 0.0],
            &JawParams::default(),
            SolveSettings::default(),
            None,
        )
        .unwrap();
        assert!(state.is_converged());
        assert_eq!(state.iterations, 0);
        assert_eq!(state.positions, anatomy.flesh.vertices());
    }

    #[test]
    fn converged_state_has_small_residual_and_warm_restart_is_free() {
        let (anatomy, basis) = anatomy_fixture(200.0);
        let sim = Simulator::new(&anatomy, &basis, SolveSettings::default()).unwrap();
        let b = [0.8, -0.5];
        let j = JawParams([0.05, 0.0, 0.02, 0.0, 0.001, 0.0]);
        let state = sim.solve(&b, &j, None).unwrap();
        assert!(state.is_converged(), "{state:?}");
        let r = sim.residual(
            &state.positions,
            &state.activations,
            &muscle_targets(&sim, &b, &j),
        );
        assert!(norm_inf(&r) < sim.tolerance());
        let again = sim.solve(&b, &j, Some(&state.positions)).unwrap();
        assert_eq!(again.iterations, 0);
        let twin = sim.solve(&b, &j, None).unwrap();
        assert_eq!(twin.positions, state.positions);
    }

    fn muscle_targets(sim: &Simulator<'_>, b: &[f64], j: &JawParams) -> Vec<Vec<Vec3>> {
        (0..sim.anatomy.muscles.len())
            .map(|m| sim.basis.targets(m, b, j))
            .collect()
    }

    #[test]
    fn residual_is_negative_energy_gradient() {
        let (mut anatomy, basis) = anatomy_fixture(300.0);
        anatomy
            .proxies
            .push(CollisionProxy::half_space(Vec3::z(), 0.012, 1e5));
        let sim = Simulator::new(&anatomy, &basis, SolveSettings::default()).unwrap();
        let b = [0.5, 0.5];
        let j = JawParams::default();
        let targets = muscle_targets(&sim, &b, &j);
        let x = sim.initial_guess(&b, &j);
        let act = [0.4];
        let r = sim.residual(&x, &act, &targets);
        let step = 1e-7;
        for (i, &v) in sim.unconstrained().iter().enumerate().step_by(5) {
            for a in 0..3 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[v][a] += step;
                xm[v][a] -= step;
                let fd = -(sim.total_energy(&xp, &act, &targets)
                    - sim.total_energy(&xm, &act, &targets))
                    / (2.0 * step);
                assert!((fd - r[3 * i + a]).abs() < 1e-5 * (1.0 + r[3 * i + a].abs()));
            }
        }
    }

    #[test]
    fn linearization_matches_residual_differences() {
        let (mut anatomy, basis) = anatomy_fixture(300.0);
        anatomy.proxies.push(CollisionProxy::sphere(
            Vec3::new(0.02, 0.015, 0.035),
            0.013,
            1e5,
        ));
        let sim = Simulator::new(&anatomy, &basis, SolveSettings::default()).unwrap();
        let b = [0.5, -0.5];
        let j = JawParams([0.02, 0.03, 0.0, 0.0, 0.0, 0.001]);
        let targets = muscle_targets(&sim, &b, &j);
        let x = sim.initial_guess(&b, &j);
        let act = [0.7];
        let (a, kuc) = sim.linearize(&x, &act, false);
        let a = a.to_dense();
        let kuc = kuc.to_dense();
        let step = 1e-7;
        let mut err = 0.0f64;
        let mut scale = 0.0f64;
        for (col_vertex, free_index, kin_index) in sim
            .unconstrained()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v, Some(i), None))
            .chain(
                sim.constrained()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| (v, None, Some(i))),
            )
        {
            for c in 0..3 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[col_vertex][c] += step;
                xm[col_vertex][c] -= step;
                let rp = sim.residual(&xp, &act, &targets);
                let rm = sim.residual(&xm, &act, &targets);
                for row in 0..rp.len() {
                    let fd = (rp[row] - rm[row]) / (2.0 * step);
                    let an = match (free_index, kin_index) {
                        (Some(i), _) => -a[row][3 * i + c],
                        (_, Some(k)) => kuc[row][3 * k + c],
                        _ => unreachable!(),
                    };
                    err += (fd - an).powi(2);
                    scale += an * an;
                }
            }
        }
        assert!(err.sqrt() / scale.sqrt() < 1e-5);
    }

    #[test]
    fn activated_muscle_shortens_and_matches_energy_minimum() {
        let (anatomy, basis) = anatomy_fixture(50.0);
        let sim = Simulator::new(&anatomy, &basis, SolveSettings::default()).unwrap();
        let b = [0.0, 0.0];
        let j = JawParams::default();
        let act = [0.8];
        let state = sim.solve_with_activations(&b, &j, &act, None).unwrap();
        assert!(state.is_converged());
        let l = curve_length(
            &anatomy.muscles[0]
                .curve_embedding
                .reconstruct(&state.positions),
        );
        assert!(l < anatomy.muscles[0].rest_length);

        // Oracle: Barzilai-Borwein gradient descent on the total energy.
        let targets = muscle_targets(&sim, &b, &j);
        let mut x = anatomy.flesh.vertices().to_vec();
        let mut g = sim.residual(&x, &act, &targets);
        let mut step = 1e-7;
        for _ in 0..200_000 {
            let mut xn = x.clone();
            for (i, &v) in sim.unconstrained().iter().enumerate() {
                xn[v] += Vec3::new(g[3 * i], g[3 * i + 1], g[3 * i + 2]) * step;
            }
            let gn = sim.residual(&xn, &act, &targets);
            let mut sy = 0.0;
            let mut yy = 0.0;
            for (i, &v) in sim.unconstrained().iter().enumerate() {
                for a in 0..3 {
                    let s = xn[v][a] - x[v][a];
                    let y = g[3 * i + a] - gn[3 * i + a];
                    sy += s * y;
                    yy += y * y;
                }
            }
            x = xn;
            g = gn;
            if norm_inf(&g) < 1e-3 * sim.tolerance() {
                break;
            }
            if yy > 0.0 && sy > 0.0 {
                step = sy / yy;
            }
        }
        let diag = anatomy.flesh.bounding_box_diagonal();
        let worst = x
            .iter()
            .zip(&state.positions)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(worst < 1e-4 * diag, "worst {worst:e}");
    }

    #[test]
    fn stronger_tracks_pull_closer_to_targets() {
        let b = [1.0, 0.5];
        let j = JawParams::default();
        let mut last = f64::INFINITY;
        for k in [1e2, 1e3, 1e4, 1e5] {
            let (anatomy, basis) = anatomy_fixture(k);
            let sim = Simulator::new(&anatomy, &basis, SolveSettings::default()).unwrap();
            let state = sim.solve_with_activations(&b, &j, &[0.5], None).unwrap();
            assert!(state.is_converged());
            let target = basis.targets(0, &b, &j);
            let dist = anatomy.muscles[0]
                .vertices
                .iter()
                .zip(&target)
                .map(|(&v, t)| (state.positions[v] - t).norm())
                .fold(0.0, f64::max);
            assert!(dist < last, "k {k}: {dist:e} !< {last:e}");
            last = dist;
        }
    }

    #[test]
    fn penetration_shrinks_with_collision_stiffness() {
        let mut last = f64::INFINITY;
        for kc in [1e4, 1e5, 1e6, 1e7] {
            let (mut anatomy, basis) = anatomy_fixture(2000.0);
            // Plane cutting into the slab top pushes flesh down; tracks pull it back up.
            anatomy
                .proxies
                .push(CollisionProxy::half_space(-Vec3::z(), -0.017, kc));
            let sim = Simulator::new(&anatomy, &basis, SolveSettings::default()).unwrap();
            let state = sim
                .solve_with_activations(&[0.0, 0.0], &JawParams::default(), &[0.0], None)
                .unwrap();
            assert!(state.is_converged());
            let depth = sim
                .unconstrained()
                .iter()
                .map(|&v| -anatomy.proxies[0].signed_distance(&state.positions[v]).0)
                .fold(0.0, f64::max);
            assert!(depth > 0.0 && depth < last, "kc {kc}: {depth:e}");
            last = depth;
        }
    }
}
