//! Derivatives of the equilibrium with respect to blendshape weights and jaw
//! parameters, and their chaining to embedded, rigidly aligned observables.
//!
//! Differentiating `f(X(p), p) = 0` gives `A ∂X^U/∂p = ∂f/∂p` with
//! `A = −∂f/∂X^U`. The right-hand side collects the activation chain
//! `f_a · da/dL · ∂L/∂C · ∂C/∂p`, the track term `k_m ∂M/∂p`, and the
//! kinematic coupling `∂f/∂X^C · ∂X^C/∂p`. All columns share one factorization.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, Vector3};
use thiserror::Error;

use crate::anatomy::curve_length_gradient;
use crate::geometry::{Embedding, Vec3};
use crate::linalg::{CsrMatrix, EnvelopeCholesky, LinalgError};
use crate::quasistatic::{EquilibriumState, Simulator};
use crate::rig::JAW_DOF;
use crate::rotation::{euler_xyz, euler_xyz_derivatives};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SensitivityError {
    #[error("equilibrium did not converge (residual {residual:e}, tolerance {tolerance:e})")]
    Unconverged { residual: f64, tolerance: f64 },
    #[error("parameter {index} out of range ({count} parameters)")]
    ParameterIndex { index: usize, count: usize },
    #[error("sensitivity system is singular: {0}")]
    Singular(LinalgError),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// One column per parameter: all `b_k`, then the six jaw parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityBlock {
    pub num_shapes: usize,
    /// `∂X^U/∂p`, each of length `3 |U|`.
    pub columns: Vec<Vec<f64>>,
    /// `∂X^C/∂p`, each of length `3 |C|` (zero for blendshape columns).
    pub constrained_columns: Vec<Vec<f64>>,
    pub unconstrained: Vec<usize>,
    pub constrained: Vec<usize>,
    /// Whether the definiteness-projected matrix had to be used.
    pub projected: bool,
}

impl SensitivityBlock {
    pub fn num_params(&self) -> usize {
        self.columns.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.unconstrained.len() + self.constrained.len()
    }

    /// `∂X/∂p` at every flesh vertex.
    pub fn full_column(&self, p: usize) -> Vec<Vec3> {
        let mut out = vec![Vec3::zeros(); self.num_vertices()];
        for (i, &v) in self.unconstrained.iter().enumerate() {
            out[v] = Vec3::from_column_slice(&self.columns[p][3 * i..3 * i + 3]);
        }
        for (i, &v) in self.constrained.iter().enumerate() {
            out[v] = Vec3::from_column_slice(&self.constrained_columns[p][3 * i..3 * i + 3]);
        }
        out
    }
}

/// Everything needed to produce sensitivity columns, independent of the
/// simulator's borrows so columns can be solved from several threads.
#[derive(Debug, Clone)]
pub struct SensitivitySystem {
    num_shapes: usize,
    factor: EnvelopeCholesky,
    coupling: CsrMatrix,
    unconstrained: Vec<usize>,
    constrained: Vec<usize>,
    dof: Vec<usize>,
    /// Per muscle: unit active force on the unconstrained dofs times `da/dL`.
    active: Vec<Vec<f64>>,
    /// Per muscle, per parameter: `∂L/∂p`.
    length_derivatives: Vec<Vec<f64>>,
    /// Per muscle: `(member vertex, stiffness, ∂M/∂p per parameter)`.
    tracks: Vec<(Vec<usize>, f64, Vec<Vec<Vec3>>)>,
    /// `∂X^C/∂j` per jaw parameter.
    kinematic: Vec<Vec<Vec3>>,
    projected: bool,
}

impl SensitivitySystem {
    pub fn new(sim: &Simulator<'_>, state: &EquilibriumState) -> Result<Self, SensitivityError> {
        if !state.is_converged() {
            return Err(SensitivityError::Unconverged {
                residual: state.residual,
                tolerance: state.tolerance,
            });
        }
        let (a, coupling) = sim.linearize(&state.positions, &state.activations, false);
        let (factor, projected) = match EnvelopeCholesky::factor(&a) {
            Ok(f) => (f, false),
            Err(_) => {
                let (ap, _) = sim.linearize(&state.positions, &state.activations, true);
                (
                    EnvelopeCholesky::factor(&ap).map_err(SensitivityError::Singular)?,
                    true,
                )
            }
        };
        let unconstrained = sim.unconstrained().to_vec();
        let mut dof = vec![usize::MAX; sim.anatomy.flesh.num_vertices()];
        for (i, &v) in unconstrained.iter().enumerate() {
            dof[v] = i;
        }
        let basis = sim.basis;
        let mut active = Vec::new();
        let mut length_derivatives = Vec::new();
        let mut tracks = Vec::new();
        for (m, muscle) in sim.anatomy.muscles.iter().enumerate() {
            let slope = state.activation_slopes[m];
            let unit = sim.body.active_unit_forces(&state.positions, muscle);
            let mut fa = vec![0.0; 3 * unconstrained.len()];
            if slope != 0.0 {
                for (i, &v) in unconstrained.iter().enumerate() {
                    for c in 0..3 {
                        fa[3 * i + c] = unit[v][c] * slope;
                    }
                }
            }
            active.push(fa);
            let curve = basis.curve(m, &state.b, &state.j);
            let dl_dc = curve_length_gradient(&curve);
            let dc = basis.muscles[m]
                .curve
                .jacobian(&basis.jaw, &state.b, &state.j);
            length_derivatives.push(
                dc.iter()
                    .map(|col| col.iter().zip(&dl_dc).map(|(d, g)| d.dot(g)).sum())
                    .collect(),
            );
            tracks.push((
                muscle.vertices.clone(),
                muscle.stiffness,
                basis.muscles[m]
                    .targets
                    .jacobian(&basis.jaw, &state.b, &state.j),
            ));
        }
        Ok(Self {
            num_shapes: basis.num_shapes(),
            factor,
            coupling,
            unconstrained,
            constrained: sim.constrained().to_vec(),
            dof,
            active,
            length_derivatives,
            tracks,
            kinematic: sim.constrained_jaw_derivatives(&state.j),
            projected,
        })
    }

    pub fn num_params(&self) -> usize {
        self.num_shapes + JAW_DOF
    }

    pub fn is_projected(&self) -> bool {
        self.projected
    }

    fn check(&self, p: usize) -> Result<(), SensitivityError> {
        if p >= self.num_params() {
            return Err(SensitivityError::ParameterIndex {
                index: p,
                count: self.num_params(),
            });
        }
        Ok(())
    }

    /// `∂f^U/∂p` at fixed positions.
    pub fn rhs(&self, p: usize) -> Result<Vec<f64>, SensitivityError> {
        self.check(p)?;
        let mut rhs = vec![0.0; 3 * self.unconstrained.len()];
        for (fa, dl) in self.active.iter().zip(&self.length_derivatives) {
            let s = dl[p];
            if s != 0.0 {
                for (r, f) in rhs.iter_mut().zip(fa) {
                    *r += f * s;
                }
            }
        }
        for (vertices, k, dm) in &self.tracks {
            for (&v, d) in vertices.iter().zip(&dm[p]) {
                let i = self.dof[v];
                for c in 0..3 {
                    rhs[3 * i + c] += k * d[c];
                }
            }
        }
        if let Some(jp) = p.checked_sub(self.num_shapes) {
            let dxc: Vec<f64> = self.kinematic[jp]
                .iter()
                .flat_map(|v| [v.x, v.y, v.z])
                .collect();
            for (r, c) in rhs.iter_mut().zip(self.coupling.mul_vec(&dxc)) {
                *r += c;
            }
        }
        Ok(rhs)
    }

    pub fn solve_column(&self, p: usize) -> Result<Vec<f64>, SensitivityError> {
        Ok(self.factor.solve(&self.rhs(p)?))
    }

    pub fn constrained_column(&self, p: usize) -> Vec<f64> {
        match p.checked_sub(self.num_shapes) {
            Some(jp) => self.kinematic[jp]
                .iter()
                .flat_map(|v| [v.x, v.y, v.z])
                .collect(),
            None => vec![0.0; 3 * self.constrained.len()],
        }
    }

    /// Builds the block from already-solved columns.
    pub fn assemble(&self, columns: Vec<Vec<f64>>) -> Result<SensitivityBlock, SensitivityError> {
        if columns.len() != self.num_params() {
            return Err(SensitivityError::Dimension {
                expected: self.num_params(),
                got: columns.len(),
            });
        }
        Ok(SensitivityBlock {
            num_shapes: self.num_shapes,
            constrained_columns: (0..self.num_params())
                .map(|p| self.constrained_column(p))
                .collect(),
            columns,
            unconstrained: self.unconstrained.clone(),
            constrained: self.constrained.clone(),
            projected: self.projected,
        })
    }
}

pub fn rhs_for_parameter(
    sim: &Simulator<'_>,
    state: &EquilibriumState,
    p: usize,
) -> Result<Vec<f64>, SensitivityError> {
    SensitivitySystem::new(sim, state)?.rhs(p)
}

/// All columns, sequentially, from one factorization.
pub fn solve_sensitivities(
    sim: &Simulator<'_>,
    state: &EquilibriumState,
) -> Result<SensitivityBlock, SensitivityError> {
    let system = SensitivitySystem::new(sim, state)?;
    let columns = (0..system.num_params())
        .map(|p| system.solve_column(p))
        .collect::<Result<Vec<_>, _>>()?;
    system.assemble(columns)
}

/// Rigid alignment `x_R = R(θ) x + t` of observable points.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RigidTransform {
    pub angles: Vec3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn from_slice(s: &[f64]) -> Self {
        Self {
            angles: Vector3::new(s[0], s[1], s[2]),
            translation: Vector3::new(s[3], s[4], s[5]),
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.angles.x,
            self.angles.y,
            self.angles.z,
            self.translation.x,
            self.translation.y,
            self.translation.z,
        ]
    }

    pub fn apply(&self, points: &[Vec3]) -> Vec<Vec3> {
        let r = euler_xyz(&self.angles);
        points.iter().map(|p| r * p + self.translation).collect()
    }

    pub fn inverse_apply(&self, points: &[Vec3]) -> Vec<Vec3> {
        let rt = euler_xyz(&self.angles).transpose();
        points.iter().map(|p| rt * (p - self.translation)).collect()
    }

    /// `∂x_R/∂(θ, t)`: `3P × 6`.
    pub fn jacobian(&self, points: &[Vec3]) -> DMatrix<f64> {
        let dr = euler_xyz_derivatives(&self.angles);
        let mut jac = DMatrix::zeros(3 * points.len(), 6);
        for (i, p) in points.iter().enumerate() {
            for k in 0..3 {
                let d = dr[k] * p;
                for a in 0..3 {
                    jac[(3 * i + a, k)] = d[a];
                }
                jac[(3 * i + k, 3 + k)] = 1.0;
            }
        }
        jac
    }
}

/// `E · ∂X/∂(b, j)`: `3P × (K + 6)`.
pub fn embed_block(block: &SensitivityBlock, embedding: &Embedding) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(3 * embedding.len(), block.num_params());
    for p in 0..block.num_params() {
        let col = block.full_column(p);
        for (i, pt) in embedding.points.iter().enumerate() {
            let v = pt.reconstruct(&col);
            for a in 0..3 {
                out[(3 * i + a, p)] = v[a];
            }
        }
    }
    out
}

/// `[R E ∂X/∂(b,j) ∂(b,j)/∂w | ∂x_R/∂θ | ∂x_R/∂t]` at embedded points whose
/// unaligned positions are `points`.
pub fn chain_to_observables(
    block: &SensitivityBlock,
    embedding: &Embedding,
    points: &[Vec3],
    rigid: &RigidTransform,
    control_jacobian: &DMatrix<f64>,
) -> Result<DMatrix<f64>, SensitivityError> {
    if control_jacobian.nrows() != block.num_params() {
        return Err(SensitivityError::Dimension {
            expected: block.num_params(),
            got: control_jacobian.nrows(),
        });
    }
    if points.len() != embedding.len() {
        return Err(SensitivityError::Dimension {
            expected: embedding.len(),
            got: points.len(),
        });
    }
    let r = euler_xyz(&rigid.angles);
    let mut e = embed_block(block, embedding) * control_jacobian;
    for i in 0..points.len() {
        for c in 0..e.ncols() {
            let v = r * Vec3::new(e[(3 * i, c)], e[(3 * i + 1, c)], e[(3 * i + 2, c)]);
            for a in 0..3 {
                e[(3 * i + a, c)] = v[a];
            }
        }
    }
    let rj = rigid.jacobian(points);
    let nw = e.ncols();
    let mut out = DMatrix::zeros(e.nrows(), nw + 6);
    out.columns_mut(0, nw).copy_from(&e);
    out.columns_mut(nw, 6).copy_from(&rj);
    Ok(out)
}
