//! Least-squares capture energies and a trust-region dogleg solver.
//!
//! Every energy is a stacked residual `r(x)` minimized as `½‖r‖²`. Weighted
//! terms enter as `√λ · r_term`.

use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::geometry::{
    assemble_laplacian, Embedding, GeometryError, SurfaceMesh, TetMesh, Vec3, VolumetricLaplacian,
};
use crate::imaging::{
    visibility, Camera, ImagePyramid, ImagingError, RotoConstraint, ShadingSetup, SH_COEFFS,
};
use crate::quasistatic::{EquilibriumState, QuasistaticError, Simulator};
use crate::rig::{surface_jacobian, ControlMap, Rig, RigError};
use crate::rotation::euler_xyz;
use crate::sensitivity::{embed_block, RigidTransform, SensitivityError, SensitivitySystem};

pub const LAMBDA_GEOMETRY: f64 = 1e-6;
pub const LAMBDA_LIGHTING: f64 = 2500.0;
pub const LAMBDA_ROTO: f64 = 3600.0;
pub const LAMBDA_REFINE_ROTO: f64 = 1e-4;
pub const LAMBDA_REFINE_PRIOR: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CaptureError {
    #[error("equilibrium did not converge at w = {w:?} (residual {residual:e})")]
    Unconverged { w: Vec<f64>, residual: f64 },
    #[error(transparent)]
    Quasistatic(#[from] QuasistaticError),
    #[error(transparent)]
    Sensitivity(#[from] SensitivityError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Rig(#[from] RigError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("capture problem has no data term")]
    NoDataTerm,
    #[error("plate is black at every visible vertex")]
    DegeneratePlate,
    #[error("invalid dogleg settings")]
    Settings,
}

/// A residual function with its Jacobian.
pub trait LeastSquares {
    fn num_params(&self) -> usize;
    /// `(r, ∂r/∂x)`.
    fn evaluate(&mut self, x: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>), CaptureError>;
    /// Maps a trial point back onto the feasible set.
    fn project(&self, _x: &mut [f64]) {}
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoglegSettings {
    pub initial_radius: f64,
    pub min_radius: f64,
    pub gradient_tolerance: f64,
    pub max_iterations: usize,
    /// Stop when a step changes `x` by less than this relative amount.
    pub step_tolerance: f64,
    pub damping: f64,
}

impl Default for DoglegSettings {
    fn default() -> Self {
        Self {
            initial_radius: 1.0,
            min_radius: 1e-12,
            gradient_tolerance: 1e-8,
            max_iterations: 200,
            step_tolerance: 1e-12,
            damping: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Gradient,
    RadiusCollapse,
    SmallStep,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DoglegReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// `½‖r‖²` after each accepted step, starting with the initial point.
    pub accepted_costs: Vec<f64>,
    pub termination: Termination,
    /// Iterations where the normal equations failed and only the Cauchy step was used.
    pub cauchy_fallbacks: usize,
    /// Trial points whose evaluation failed (treated as rejected steps).
    pub failed_evaluations: usize,
}

impl DoglegReport {
    pub fn is_monotone(&self) -> bool {
        self.accepted_costs.windows(2).all(|w| w[1] <= w[0])
    }
}

fn cost(r: &[f64]) -> f64 {
    0.5 * r.iter().map(|v| v * v).sum::<f64>()
}

/// Powell's dogleg with a Gauss-Newton Hessian.
pub fn dogleg_minimize<P: LeastSquares + ?Sized>(
    problem: &mut P,
    x0: &[f64],
    settings: &DoglegSettings,
) -> Result<(Vec<f64>, DoglegReport), CaptureError> {
    if !(settings.min_radius > 0.0 && settings.min_radius < settings.initial_radius) {
        return Err(CaptureError::Settings);
    }
    let n = problem.num_params();
    if x0.len() != n {
        return Err(CaptureError::Dimension {
            expected: n,
            got: x0.len(),
        });
    }
    let mut x = DVector::from_column_slice(x0);
    let (r0, j0) = problem.evaluate(x.as_slice())?;
    let mut r = DVector::from_vec(r0);
    let mut jac = j0;
    let mut f = cost(r.as_slice());
    let mut report = DoglegReport {
        iterations: 0,
        initial_cost: f,
        final_cost: f,
        accepted_costs: vec![f],
        termination: Termination::MaxIterations,
        cauchy_fallbacks: 0,
        failed_evaluations: 0,
    };
    let mut radius = settings.initial_radius;
    let mut gn: Option<DVector<f64>> = None;
    let mut grad = jac.tr_mul(&r);
    while report.iterations < settings.max_iterations {
        if grad.amax() <= settings.gradient_tolerance || f == 0.0 {
            report.termination = Termination::Gradient;
            break;
        }
        if radius < settings.min_radius {
            report.termination = Termination::RadiusCollapse;
            break;
        }
        report.iterations += 1;
        if gn.is_none() {
            let mut normal = jac.tr_mul(&jac);
            let scale = normal.diagonal().amax().max(1e-300);
            for i in 0..n {
                normal[(i, i)] += settings.damping * (normal[(i, i)] + scale);
            }
            gn = match normal.cholesky() {
                Some(c) => Some(-c.solve(&grad)),
                None => {
                    report.cauchy_fallbacks += 1;
                    Some(DVector::zeros(0))
                }
            };
        }
        let h_gn = gn.as_ref().unwrap();
        let jg = &jac * &grad;
        let alpha = grad.norm_squared() / jg.norm_squared().max(1e-300);
        let h_sd = &grad * -alpha;
        let step = if h_gn.len() == n && h_gn.norm() <= radius {
            h_gn.clone()
        } else if h_gn.len() != n || h_sd.norm() >= radius {
            &grad * (-radius / grad.norm())
        } else {
            let d = h_gn - &h_sd;
            let a = d.norm_squared();
            let b = 2.0 * h_sd.dot(&d);
            let c = h_sd.norm_squared() - radius * radius;
            let beta = (-b + (b * b - 4.0 * a * c).max(0.0).sqrt()) / (2.0 * a);
            &h_sd + d * beta
        };
        let step_norm = step.norm();
        if step_norm <= settings.step_tolerance * (x.norm() + settings.step_tolerance) {
            report.termination = Termination::SmallStep;
            break;
        }
        let jh = &jac * &step;
        let predicted = -grad.dot(&step) - 0.5 * jh.norm_squared();
        let mut trial = &x + &step;
        problem.project(trial.as_mut_slice());
        match problem.evaluate(trial.as_slice()) {
            Ok((rt, jt)) => {
                let ft = cost(&rt);
                let rho = if predicted > 0.0 {
                    (f - ft) / predicted
                } else {
                    -1.0
                };
                if rho > 0.0 && ft <= f {
                    x = trial;
                    r = DVector::from_vec(rt);
                    jac = jt;
                    f = ft;
                    grad = jac.tr_mul(&r);
                    gn = None;
                    report.accepted_costs.push(f);
                }
                if rho < 0.25 {
                    radius *= 0.25;
                } else if rho > 0.75 {
                    radius = (2.0 * radius).max(2.0 * step_norm);
                }
            }
            Err(CaptureError::Unconverged { .. }) => {
                report.failed_evaluations += 1;
                radius *= 0.25;
            }
            Err(e) => return Err(e),
        }
    }
    report.final_cost = f;
    Ok((x.as_slice().to_vec(), report))
}

/// Animator controls to (unaligned) surface positions.
pub trait Deformer {
    fn num_controls(&self) -> usize;
    fn num_vertices(&self) -> usize;
    /// Surface and `∂x/∂w` (`3V × |w|`).
    fn evaluate(&mut self, w: &[f64]) -> Result<(Vec<Vec3>, DMatrix<f64>), CaptureError>;
    fn surface(&mut self, w: &[f64]) -> Result<Vec<Vec3>, CaptureError> {
        Ok(self.evaluate(w)?.0)
    }
}

/// Pure blendshape + skinning deformer.
pub struct BlendshapeDeformer<'a> {
    pub rig: &'a Rig,
    pub controls: &'a dyn ControlMap,
}

impl Deformer for BlendshapeDeformer<'_> {
    fn num_controls(&self) -> usize {
        self.controls.num_controls()
    }

    fn num_vertices(&self) -> usize {
        self.rig.num_vertices()
    }

    fn evaluate(&mut self, w: &[f64]) -> Result<(Vec<Vec3>, DMatrix<f64>), CaptureError> {
        let (b, j) = self.controls.evaluate(w);
        if w.len() != self.controls.num_controls() {
            return Err(RigError::ControlCount {
                expected: self.controls.num_controls(),
                got: w.len(),
            }
            .into());
        }
        Ok((
            self.rig.surface(&b, &j),
            surface_jacobian(self.rig, self.controls, w)?,
        ))
    }
}

/// Solves every sensitivity column of a factored system.
pub trait ColumnSolver {
    fn solve_all(&self, system: &SensitivitySystem) -> Result<Vec<Vec<f64>>, SensitivityError>;
}

/// Columns in parameter order on the calling thread.
pub struct Sequential;

impl ColumnSolver for Sequential {
    fn solve_all(&self, system: &SensitivitySystem) -> Result<Vec<Vec<f64>>, SensitivityError> {
        (0..system.num_params())
            .map(|p| system.solve_column(p))
            .collect()
    }
}

/// Muscle-simulation deformer: equilibrium at `(b, j)(w)`, read at the
/// flesh vertices bound to the surface.
pub struct SimulationDeformer<'a> {
    pub sim: Simulator<'a>,
    pub controls: &'a dyn ControlMap,
    pub columns: &'a dyn ColumnSolver,
    pub surface_embedding: Embedding,
    /// Solve every evaluation from the morph instead of the last state.
    pub cold_start: bool,
    last: Option<(Vec<f64>, EquilibriumState, DMatrix<f64>)>,
}

impl<'a> SimulationDeformer<'a> {
    pub fn new(sim: Simulator<'a>, controls: &'a dyn ControlMap) -> Result<Self, CaptureError> {
        let surface_embedding =
            Embedding::of_vertices(&sim.anatomy.flesh, &sim.anatomy.surface_to_flesh)?;
        Ok(Self {
            sim,
            controls,
            columns: &Sequential,
            surface_embedding,
            cold_start: false,
            last: None,
        })
    }

    pub fn last_state(&self) -> Option<&EquilibriumState> {
        self.last.as_ref().map(|l| &l.1)
    }

    pub fn solve(&mut self, w: &[f64]) -> Result<EquilibriumState, CaptureError> {
        let (b, j) = self.controls.evaluate(w);
        let warm = if self.cold_start {
            None
        } else {
            self.last.as_ref().map(|l| l.1.positions.clone())
        };
        let state = self.sim.solve(&b, &j, warm.as_deref())?;
        if !state.is_converged() {
            return Err(CaptureError::Unconverged {
                w: w.to_vec(),
                residual: state.residual,
            });
        }
        Ok(state)
    }
}

impl Deformer for SimulationDeformer<'_> {
    fn num_controls(&self) -> usize {
        self.controls.num_controls()
    }

    fn num_vertices(&self) -> usize {
        self.surface_embedding.len()
    }

    fn evaluate(&mut self, w: &[f64]) -> Result<(Vec<Vec3>, DMatrix<f64>), CaptureError> {
        if w.len() != self.controls.num_controls() {
            return Err(CaptureError::Dimension {
                expected: self.controls.num_controls(),
                got: w.len(),
            });
        }
        if let Some((lw, state, jac)) = &self.last {
            if lw.as_slice() == w {
                return Ok((
                    self.surface_embedding.reconstruct(&state.positions),
                    jac.clone(),
                ));
            }
        }
        let state = self.solve(w)?;
        let system = SensitivitySystem::new(&self.sim, &state)?;
        let columns = self.columns.solve_all(&system)?;
        let block = system.assemble(columns)?;
        let jac = embed_block(&block, &self.surface_embedding) * self.controls.jacobian(w);
        let surface = self.surface_embedding.reconstruct(&state.positions);
        self.last = Some((w.to_vec(), state, jac.clone()));
        Ok((surface, jac))
    }
}

/// Geometry target with per-vertex correspondence.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryTerm {
    pub target: Vec<Vec3>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RotoTerm {
    pub constraints: RotoConstraint,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct ShadingTerm<'a> {
    pub plate: &'a ImagePyramid,
    pub gamma: [f64; SH_COEFFS],
    pub albedo: Vec<Vec3>,
    pub level_weights: Vec<f64>,
    pub weight: f64,
}

/// `√λ (w − anchor)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Regularizer {
    pub lambda: f64,
    pub anchor: Vec<f64>,
}

/// Controls (and optionally rigid alignment) fitted against any mix of
/// geometry, roto and shading terms.
pub struct CaptureProblem<'a, 'd> {
    pub deformer: &'d mut dyn Deformer,
    pub triangles: &'a [[usize; 3]],
    pub camera: Option<&'a Camera>,
    pub geometry: Option<GeometryTerm>,
    pub roto: Option<RotoTerm>,
    pub shading: Option<ShadingTerm<'a>>,
    pub regularizer: Regularizer,
    /// Alignment used when `free_rigid` is false, and the starting point otherwise.
    pub rigid: RigidTransform,
    pub free_rigid: bool,
}

/// Named residual block norms at a parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TermNorms {
    pub geometry: f64,
    pub roto: f64,
    pub shading: f64,
    pub regularizer: f64,
}

impl<'a, 'd> CaptureProblem<'a, 'd> {
    pub fn new(deformer: &'d mut dyn Deformer, triangles: &'a [[usize; 3]], lambda: f64) -> Self {
        let n = deformer.num_controls();
        Self {
            deformer,
            triangles,
            camera: None,
            geometry: None,
            roto: None,
            shading: None,
            regularizer: Regularizer {
                lambda,
                anchor: vec![0.0; n],
            },
            rigid: RigidTransform::default(),
            free_rigid: false,
        }
    }

    pub fn num_controls(&self) -> usize {
        self.deformer.num_controls()
    }

    pub fn split(&self, x: &[f64]) -> (Vec<f64>, RigidTransform) {
        let n = self.num_controls();
        let rigid = if self.free_rigid {
            RigidTransform::from_slice(&x[n..n + 6])
        } else {
            self.rigid
        };
        (x[..n].to_vec(), rigid)
    }

    pub fn initial_parameters(&self) -> Vec<f64> {
        let mut x = vec![0.0; self.num_controls()];
        if self.free_rigid {
            x.extend_from_slice(&self.rigid.to_array());
        }
        x
    }

    /// Aligned surface at `x`.
    pub fn aligned_surface(&mut self, x: &[f64]) -> Result<Vec<Vec3>, CaptureError> {
        let (w, rigid) = self.split(x);
        Ok(rigid.apply(&self.deformer.surface(&w)?))
    }

    /// Stacked residual, Jacobian and per-term norms.
    pub fn residual_and_jacobian(
        &mut self,
        x: &[f64],
    ) -> Result<(Vec<f64>, DMatrix<f64>, TermNorms), CaptureError> {
        if self.geometry.is_none() && self.roto.is_none() && self.shading.is_none() {
            return Err(CaptureError::NoDataTerm);
        }
        if x.len() != self.num_params() {
            return Err(CaptureError::Dimension {
                expected: self.num_params(),
                got: x.len(),
            });
        }
        let nw = self.num_controls();
        let np = self.num_params();
        let (w, rigid) = self.split(x);
        let (surface, jx) = self.deformer.evaluate(&w)?;
        let nv = surface.len();
        let rot = euler_xyz(&rigid.angles);
        let aligned = rigid.apply(&surface);
        // ∂x_R/∂x (params): rotate the deformer Jacobian, append rigid columns.
        let mut jr = DMatrix::zeros(3 * nv, np);
        for i in 0..nv {
            for c in 0..nw {
                let v = rot * Vec3::new(jx[(3 * i, c)], jx[(3 * i + 1, c)], jx[(3 * i + 2, c)]);
                for a in 0..3 {
                    jr[(3 * i + a, c)] = v[a];
                }
            }
        }
        if self.free_rigid {
            jr.columns_mut(nw, 6).copy_from(&rigid.jacobian(&surface));
        }
        let mut blocks: Vec<(Vec<f64>, DMatrix<f64>)> = Vec::new();
        let mut norms = TermNorms::default();
        if let Some(g) = &self.geometry {
            if g.target.len() != nv {
                return Err(CaptureError::Dimension {
                    expected: nv,
                    got: g.target.len(),
                });
            }
            let s = g.weight.sqrt();
            let r: Vec<f64> = aligned
                .iter()
                .zip(&g.target)
                .flat_map(|(a, t)| {
                    let d = (a - t) * s;
                    [d.x, d.y, d.z]
                })
                .collect();
            norms.geometry = crate::linalg::norm2(&r);
            blocks.push((r, &jr * s));
        }
        if let Some(term) = &self.roto {
            let cam = self.camera.ok_or(CaptureError::NoDataTerm)?;
            let s = term.weight.sqrt();
            let r: Vec<f64> = term
                .constraints
                .residual(&aligned, cam)?
                .iter()
                .map(|v| v * s)
                .collect();
            let j = term.constraints.jacobian(&aligned, cam) * &jr * s;
            norms.roto = crate::linalg::norm2(&r);
            blocks.push((r, j));
        }
        if let Some(term) = &self.shading {
            let cam = self.camera.ok_or(CaptureError::NoDataTerm)?;
            let setup = ShadingSetup {
                camera: cam,
                triangles: self.triangles,
                plate: term.plate,
                level_weights: &term.level_weights,
            };
            let normals = crate::geometry::vertex_normals(&aligned, self.triangles);
            let vis = visibility(cam, &aligned, &normals);
            let lin = setup.evaluate(&aligned, &term.gamma, &term.albedo, &vis, true)?;
            let s = term.weight.sqrt();
            let r: Vec<f64> = lin.residual.iter().map(|v| v * s).collect();
            norms.shading = crate::linalg::norm2(&r);
            blocks.push((r, lin.d_positions * &jr * s));
        }
        let s = self.regularizer.lambda.sqrt();
        let mut reg_j = DMatrix::zeros(nw, np);
        let reg_r: Vec<f64> = (0..nw)
            .map(|k| {
                reg_j[(k, k)] = s;
                s * (w[k] - self.regularizer.anchor[k])
            })
            .collect();
        norms.regularizer = crate::linalg::norm2(&reg_r);
        blocks.push((reg_r, reg_j));
        let rows: usize = blocks.iter().map(|b| b.0.len()).sum();
        let mut r = Vec::with_capacity(rows);
        let mut jac = DMatrix::zeros(rows, np);
        let mut at = 0;
        for (br, bj) in blocks {
            jac.rows_mut(at, br.len()).copy_from(&bj);
            at += br.len();
            r.extend(br);
        }
        Ok((r, jac, norms))
    }

    pub fn num_params(&self) -> usize {
        self.num_controls() + if self.free_rigid { 6 } else { 0 }
    }
}

impl LeastSquares for CaptureProblem<'_, '_> {
    fn num_params(&self) -> usize {
        CaptureProblem::num_params(self)
    }

    fn evaluate(&mut self, x: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>), CaptureError> {
        let (r, j, _) = self.residual_and_jacobian(x)?;
        Ok((r, j))
    }
}

/// Surface root-mean-square distance.
pub fn rmse(a: &[Vec3], b: &[Vec3]) -> f64 {
    (a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).norm_squared())
        .sum::<f64>()
        / a.len().max(1) as f64)
        .sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeometryFit {
    pub w: Vec<f64>,
    pub rigid: RigidTransform,
    pub surface: Vec<Vec3>,
    pub rmse: f64,
    pub norms: TermNorms,
    pub report: DoglegReport,
}

/// Fits `(w, θ, t)` from zeros to a corresponding target surface.
pub fn fit_geometry(
    deformer: &mut dyn Deformer,
    triangles: &[[usize; 3]],
    target: &[Vec3],
    lambda: f64,
    settings: &DoglegSettings,
) -> Result<GeometryFit, CaptureError> {
    let mut problem = CaptureProblem::new(deformer, triangles, lambda);
    problem.geometry = Some(GeometryTerm {
        target: target.to_vec(),
        weight: 1.0,
    });
    problem.free_rigid = true;
    let x0 = problem.initial_parameters();
    let (x, report) = dogleg_minimize(&mut problem, &x0, settings)?;
    let (_, _, norms) = problem.residual_and_jacobian(&x)?;
    let (w, rigid) = problem.split(&x);
    let surface = problem.aligned_surface(&x)?;
    Ok(GeometryFit {
        rmse: rmse(&surface, target),
        w,
        rigid,
        surface,
        norms,
        report,
    })
}

/// Graph-Laplacian smoothness `S(c)_i = Σ_{j∈N(i)} (c_i − c_j)`, per channel.
pub fn albedo_smoothness(neighbors: &[Vec<usize>], albedo: &[Vec3]) -> Vec<Vec3> {
    neighbors
        .iter()
        .enumerate()
        .map(|(i, nb)| {
            nb.iter()
                .fold(Vec3::zeros(), |acc, &j| acc + albedo[i] - albedo[j])
        })
        .collect()
}

/// Lighting and albedo at a fixed pose; parameters are `[γ, c]`.
pub struct LightingProblem<'a> {
    pub setup: ShadingSetup<'a>,
    pub positions: &'a [Vec3],
    pub visible: Vec<bool>,
    pub neighbors: Vec<Vec<usize>>,
    pub lambda: f64,
}

impl<'a> LightingProblem<'a> {
    pub fn new(
        camera: &'a Camera,
        triangles: &'a [[usize; 3]],
        plate: &'a ImagePyramid,
        positions: &'a [Vec3],
        lambda: f64,
    ) -> Self {
        let mesh = SurfaceMesh::new(positions.to_vec(), triangles.to_vec());
        let visible = visibility(camera, positions, &mesh.normals);
        Self {
            setup: ShadingSetup {
                camera,
                triangles,
                plate,
                level_weights: &[1.0],
            },
            positions,
            visible,
            neighbors: mesh.neighbors(),
            lambda,
        }
    }

    pub fn unpack(x: &[f64]) -> ([f64; SH_COEFFS], Vec<Vec3>) {
        let mut gamma = [0.0; SH_COEFFS];
        gamma.copy_from_slice(&x[..SH_COEFFS]);
        let albedo = x[SH_COEFFS..]
            .chunks(3)
            .map(Vec3::from_column_slice)
            .collect();
        (gamma, albedo)
    }

    pub fn pack(gamma: &[f64; SH_COEFFS], albedo: &[Vec3]) -> Vec<f64> {
        let mut x = gamma.to_vec();
        x.extend(albedo.iter().flat_map(|c| [c.x, c.y, c.z]));
        x
    }
}

impl LeastSquares for LightingProblem<'_> {
    fn num_params(&self) -> usize {
        SH_COEFFS + 3 * self.positions.len()
    }

    fn evaluate(&mut self, x: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>), CaptureError> {
        let nv = self.positions.len();
        let (gamma, albedo) = Self::unpack(x);
        let lin = self
            .setup
            .evaluate(self.positions, &gamma, &albedo, &self.visible, true)?;
        let rows = lin.residual.len() + 3 * nv;
        let mut jac = DMatrix::zeros(rows, self.num_params());
        let data_rows = lin.residual.len();
        jac.view_mut((0, 0), (data_rows, SH_COEFFS))
            .copy_from(&lin.d_gamma);
        jac.view_mut((0, SH_COEFFS), (data_rows, 3 * nv))
            .copy_from(&lin.d_albedo);
        let s = self.lambda.sqrt();
        let mut r = lin.residual;
        for (i, d) in albedo_smoothness(&self.neighbors, &albedo)
            .iter()
            .enumerate()
        {
            r.extend_from_slice((d * s).as_slice());
            let deg = self.neighbors[i].len() as f64;
            for c in 0..3 {
                let row = data_rows + 3 * i + c;
                jac[(row, SH_COEFFS + 3 * i + c)] += s * deg;
                for &j in &self.neighbors[i] {
                    jac[(row, SH_COEFFS + 3 * j + c)] -= s;
                }
            }
        }
        Ok((r, jac))
    }

    fn project(&self, x: &mut [f64]) {
        for c in &mut x[SH_COEFFS..] {
            *c = c.max(0.0);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LightingFit {
    pub gamma: [f64; SH_COEFFS],
    pub albedo: Vec<Vec3>,
    pub report: DoglegReport,
}

/// Fits SH lighting and per-vertex albedo to a plate at a fixed pose.
pub fn fit_lighting(
    camera: &Camera,
    triangles: &[[usize; 3]],
    plate: &ImagePyramid,
    positions: &[Vec3],
    lambda: f64,
    settings: &DoglegSettings,
) -> Result<LightingFit, CaptureError> {
    let mut problem = LightingProblem::new(camera, triangles, plate, positions, lambda);
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, x) in positions.iter().enumerate() {
        if problem.visible[i] {
            let (u, v, _) = camera.project(x)?;
            sum += plate.levels[0].sample(u, v).0.mean();
            count += 1;
        }
    }
    if count == 0 {
        return Err(ImagingError::NothingVisible.into());
    }
    let mean = sum / count as f64;
    if !(mean > 1e-6) {
        return Err(CaptureError::DegeneratePlate);
    }
    let mut gamma = [0.0; SH_COEFFS];
    gamma[0] = mean / (0.5 * 0.282095);
    let x0 = LightingProblem::pack(&gamma, &vec![Vec3::repeat(0.5); positions.len()]);
    let (x, report) = dogleg_minimize(&mut problem, &x0, settings)?;
    let (gamma, albedo) = LightingProblem::unpack(&x);
    Ok(LightingFit {
        gamma,
        albedo,
        report,
    })
}

/// Weights of the two image stages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageWeights {
    pub roto: f64,
    pub refine_roto: f64,
    pub refine_prior: f64,
}

impl Default for ImageWeights {
    fn default() -> Self {
        Self {
            roto: LAMBDA_ROTO,
            refine_roto: LAMBDA_REFINE_ROTO,
            refine_prior: LAMBDA_REFINE_PRIOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageFit {
    pub w_hat: Vec<f64>,
    pub w: Vec<f64>,
    pub rigid: RigidTransform,
    pub stage1: DoglegReport,
    pub stage2: DoglegReport,
    pub norms: TermNorms,
}

/// Inputs shared by both image stages.
pub struct ImageTargets<'a> {
    pub camera: &'a Camera,
    pub plate: &'a ImagePyramid,
    pub roto: &'a RotoConstraint,
    pub gamma: [f64; SH_COEFFS],
    pub albedo: &'a [Vec3],
    pub level_weights: &'a [f64],
}

/// Roto-only initialization `ŵ`, then shading refinement anchored at `ŵ`.
pub fn fit_image(
    deformer: &mut dyn Deformer,
    triangles: &[[usize; 3]],
    targets: &ImageTargets<'_>,
    rigid: RigidTransform,
    free_rigid: bool,
    weights: &ImageWeights,
    settings: &DoglegSettings,
) -> Result<ImageFit, CaptureError> {
    let (x_hat, stage1) = {
        let mut p = CaptureProblem::new(&mut *deformer, triangles, weights.roto);
        p.camera = Some(targets.camera);
        p.roto = Some(RotoTerm {
            constraints: targets.roto.clone(),
            weight: 1.0,
        });
        p.rigid = rigid;
        p.free_rigid = free_rigid;
        let x0 = p.initial_parameters();
        dogleg_minimize(&mut p, &x0, settings)?
    };
    let mut p = CaptureProblem::new(&mut *deformer, triangles, weights.refine_prior);
    p.camera = Some(targets.camera);
    p.rigid = rigid;
    p.free_rigid = free_rigid;
    let (w_hat, rigid_hat) = p.split(&x_hat);
    p.rigid = rigid_hat;
    p.regularizer.anchor = w_hat.clone();
    p.roto = Some(RotoTerm {
        constraints: targets.roto.clone(),
        weight: weights.refine_roto,
    });
    p.shading = Some(ShadingTerm {
        plate: targets.plate,
        gamma: targets.gamma,
        albedo: targets.albedo.to_vec(),
        level_weights: targets.level_weights.to_vec(),
        weight: 1.0,
    });
    let (x, stage2) = dogleg_minimize(&mut p, &x_hat, settings)?;
    let (_, _, norms) = p.residual_and_jacobian(&x)?;
    let (w, rigid) = p.split(&x);
    Ok(ImageFit {
        w_hat,
        w,
        rigid,
        stage1,
        stage2,
        norms,
    })
}

/// Flesh volume implied by the pure blendshape deformer: the harmonic
/// extension of the surface and kinematic displacements, with both sets
/// pinned.
pub struct EmbeddedVolume {
    laplacian: VolumetricLaplacian,
    /// For each Laplacian Dirichlet vertex: `Some(surface index)` or `None`
    /// for a kinematic vertex.
    sources: Vec<Option<usize>>,
}

impl EmbeddedVolume {
    pub fn new(
        flesh: &TetMesh,
        surface_to_flesh: &[usize],
        constrained: &[usize],
    ) -> Result<Self, CaptureError> {
        let mut pinned: Vec<usize> = surface_to_flesh
            .iter()
            .chain(constrained)
            .copied()
            .collect();
        pinned.sort_unstable();
        pinned.dedup();
        let laplacian = assemble_laplacian(flesh, &pinned)?;
        let mut surface_of = vec![usize::MAX; flesh.num_vertices()];
        for (s, &f) in surface_to_flesh.iter().enumerate() {
            surface_of[f] = s;
        }
        let sources = laplacian
            .constrained()
            .iter()
            .map(|&v| match surface_of[v] {
                usize::MAX => None,
                s => Some(s),
            })
            .collect();
        Ok(Self { laplacian, sources })
    }

    /// Embedded flesh positions for a deformed surface and kinematic positions
    /// (given per flesh vertex in `kinematic`).
    pub fn positions(
        &self,
        flesh: &TetMesh,
        surface: &[Vec3],
        kinematic: &[Vec3],
    ) -> Result<Vec<Vec3>, CaptureError> {
        let rest = flesh.vertices();
        let d: Vec<Vec3> = self
            .laplacian
            .constrained()
            .iter()
            .zip(&self.sources)
            .map(|(&v, src)| match src {
                Some(s) => surface[*s] - rest[v],
                None => kinematic[v] - rest[v],
            })
            .collect();
        let disp = self.laplacian.extend(&d)?;
        Ok(rest.iter().zip(disp).map(|(r, d)| r + d).collect())
    }
}

/// Total and regional relative volume change `(V − V0) / V0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolumeChange {
    pub total: f64,
    pub region: f64,
}

pub fn volume_change(flesh: &TetMesh, positions: &[Vec3], region: &[usize]) -> VolumeChange {
    let all: Vec<usize> = (0..flesh.tets().len()).collect();
    let v0 = flesh.volume_of(&all, flesh.vertices());
    let r0 = flesh.volume_of(region, flesh.vertices());
    VolumeChange {
        total: (flesh.volume(positions) - v0) / v0,
        region: if r0 > 0.0 {
            (flesh.volume_of(region, positions) - r0) / r0
        } else {
            0.0
        },
    }
}
