//! Muscles, the precomputed blendshape-driven muscle basis, and the
//! activation-length law.
//!
//! Muscle targets and center-line curves are sampled from the harmonic
//! extension of each blendshape into the flesh volume, so at runtime
//!
//! ```text
//! M_m(b, j) = T_m(j) (M_m^0 + Σ_k M_m^k b_k)
//! C_m(b, j) = T_m(j) (C_m^0 + Σ_k C_m^k b_k)
//! ```
//!
//! is a handful of multiply-adds per point.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::geometry::{
    embed, CollisionProxy, Embedding, GeometryError, TetMesh, Vec3, VolumetricLaplacian,
};
use crate::material::MaterialParams;
use crate::rig::{JawJoint, JawParams, Rig, JAW_DOF};

/// Default smoothing half-width as a fraction of the rest length.
pub const DEFAULT_SMOOTHING_FRACTION: f64 = 0.01;
pub const DEFAULT_SHORTENING: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnatomyError {
    #[error("muscle {0} has no tets")]
    EmptyMuscle(usize),
    #[error("muscle {muscle}: {got} fiber directions for {expected} tets")]
    FiberCount {
        muscle: usize,
        expected: usize,
        got: usize,
    },
    #[error("muscle {muscle}: fiber {fiber} is not a unit vector")]
    BadFiber { muscle: usize, fiber: usize },
    #[error("muscle {muscle}: tet index {tet} out of range")]
    TetIndex { muscle: usize, tet: usize },
    #[error("muscle {0}: center-line curve needs at least two points")]
    ShortCurve(usize),
    #[error("muscle {0}: track stiffness must be positive")]
    Stiffness(usize),
    #[error("invalid activation curve (rest length {rest_length}, shortening {shortening}, smoothing {smoothing})")]
    ActivationCurve {
        rest_length: f64,
        shortening: f64,
        smoothing: f64,
    },
    #[error("muscle {muscle}: {source}")]
    Embedding {
        muscle: usize,
        source: GeometryError,
    },
    #[error("surface correspondence has {got} entries, rig has {expected} vertices")]
    Correspondence { expected: usize, got: usize },
    #[error("Laplacian constrained vertex {0} has no surface vertex")]
    UnmappedBoundary(usize),
    #[error("Poisson solve for blendshape {shape} failed: {source}")]
    ShapeSolve { shape: usize, source: GeometryError },
    #[error("skin weight diffusion failed: {0}")]
    SkinSolve(GeometryError),
    #[error("blendshape vector has {got} entries, basis has {expected} shapes")]
    ShapeCount { expected: usize, got: usize },
}

/// Smoothed linear ramp from curve length to activation.
///
/// `a = clamp((L0 − L) / (s L0), 0, 1)` with both corners replaced by cubic
/// blends of width `2h` lying inside the ramp, so `a(L0) = 0` exactly and the
/// curve is C1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivationCurve {
    pub rest_length: f64,
    pub shortening: f64,
    pub smoothing: f64,
}

impl ActivationCurve {
    pub fn new(rest_length: f64, shortening: f64, smoothing: f64) -> Result<Self, AnatomyError> {
        let ok = rest_length > 0.0
            && shortening > 0.0
            && shortening < 1.0
            && smoothing >= 0.0
            && smoothing <= 0.25 * shortening * rest_length;
        if !ok {
            return Err(AnatomyError::ActivationCurve {
                rest_length,
                shortening,
                smoothing,
            });
        }
        Ok(Self {
            rest_length,
            shortening,
            smoothing,
        })
    }

    pub fn with_default_smoothing(rest_length: f64, shortening: f64) -> Result<Self, AnatomyError> {
        Self::new(
            rest_length,
            shortening,
            DEFAULT_SMOOTHING_FRACTION * rest_length,
        )
    }

    /// Returns `(a, da/dL)`.
    pub fn evaluate(&self, length: f64) -> (f64, f64) {
        let span = self.shortening * self.rest_length;
        let m = 1.0 / span;
        let h = self.smoothing;
        let u = self.rest_length - length;
        let blend = |x: f64| {
            (
                m * x * x / h - m * x * x * x / (4.0 * h * h),
                2.0 * m * x / h - 3.0 * m * x * x / (4.0 * h * h),
            )
        };
        if u <= 0.0 {
            (0.0, 0.0)
        } else if u >= span {
            (1.0, 0.0)
        } else if h > 0.0 && u < 2.0 * h {
            let (p, dp) = blend(u);
            (p, -dp)
        } else if h > 0.0 && u > span - 2.0 * h {
            let (p, dp) = blend(span - u);
            (1.0 - p, -dp)
        } else {
            (m * u, -m)
        }
    }
}

pub fn activation(curve: &ActivationCurve, length: f64) -> (f64, f64) {
    curve.evaluate(length)
}

pub fn curve_length(points: &[Vec3]) -> f64 {
    points.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

/// `∂L/∂C_i` for each curve point.
pub fn curve_length_gradient(points: &[Vec3]) -> Vec<Vec3> {
    let mut g = vec![Vec3::zeros(); points.len()];
    for (i, w) in points.windows(2).enumerate() {
        let d = w[1] - w[0];
        let n = d.norm();
        if n > 0.0 {
            let u = d / n;
            g[i] -= u;
            g[i + 1] += u;
        }
    }
    g
}

#[derive(Debug, Clone, PartialEq)]
pub struct Muscle {
    pub name: String,
    /// Flesh tets belonging to the muscle (may overlap other muscles).
    pub tets: Vec<usize>,
    /// Unit rest fiber direction per tet.
    pub fibers: Vec<Vec3>,
    /// Unconstrained flesh vertices tracked by this muscle, sorted.
    pub vertices: Vec<usize>,
    pub stiffness: f64,
    pub curve: Vec<Vec3>,
    pub curve_embedding: Embedding,
    pub rest_length: f64,
    pub shortening: f64,
    pub smoothing: f64,
}

impl Muscle {
    /// Builds a muscle over `tets`. Member vertices are every vertex of the
    /// tets that is not in `constrained`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        index: usize,
        name: String,
        flesh: &TetMesh,
        constrained: &[usize],
        tets: Vec<usize>,
        fibers: Vec<Vec3>,
        stiffness: f64,
        curve: Vec<Vec3>,
        shortening: f64,
    ) -> Result<Self, AnatomyError> {
        if tets.is_empty() {
            return Err(AnatomyError::EmptyMuscle(index));
        }
        if fibers.len() != tets.len() {
            return Err(AnatomyError::FiberCount {
                muscle: index,
                expected: tets.len(),
                got: fibers.len(),
            });
        }
        if let Some(&tet) = tets.iter().find(|&&t| t >= flesh.tets().len()) {
            return Err(AnatomyError::TetIndex { muscle: index, tet });
        }
        if let Some(fiber) = fibers.iter().position(|f| (f.norm() - 1.0).abs() > 1e-9) {
            return Err(AnatomyError::BadFiber {
                muscle: index,
                fiber,
            });
        }
        if curve.len() < 2 {
            return Err(AnatomyError::ShortCurve(index));
        }
        if !(stiffness > 0.0) {
            return Err(AnatomyError::Stiffness(index));
        }
        let curve_embedding = embed(&curve, flesh).map_err(|source| AnatomyError::Embedding {
            muscle: index,
            source,
        })?;
        let rest_length = curve_length(&curve_embedding.reconstruct(flesh.vertices()));
        let smoothing = DEFAULT_SMOOTHING_FRACTION * rest_length;
        ActivationCurve::new(rest_length, shortening, smoothing)?;
        let mut is_constrained = vec![false; flesh.num_vertices()];
        for &c in constrained {
            is_constrained[c] = true;
        }
        let mut vertices: Vec<usize> = tets
            .iter()
            .flat_map(|&t| flesh.tets()[t])
            .filter(|&v| !is_constrained[v])
            .collect();
        vertices.sort_unstable();
        vertices.dedup();
        Ok(Self {
            name,
            tets,
            fibers,
            vertices,
            stiffness,
            curve,
            curve_embedding,
            rest_length,
            shortening,
            smoothing,
        })
    }

    pub fn activation_curve(&self) -> ActivationCurve {
        ActivationCurve {
            rest_length: self.rest_length,
            shortening: self.shortening,
            smoothing: self.smoothing,
        }
    }
}

/// The full simulation model: flesh, muscles, material, and collision proxies.
#[derive(Debug, Clone)]
pub struct Anatomy {
    pub flesh: TetMesh,
    pub muscles: Vec<Muscle>,
    pub material: MaterialParams,
    pub proxies: Vec<CollisionProxy>,
    /// Kinematic vertices (the inner boundary), sorted.
    pub constrained: Vec<usize>,
    /// Flesh vertex for each rig surface vertex.
    pub surface_to_flesh: Vec<usize>,
}

impl Anatomy {
    pub fn num_muscles(&self) -> usize {
        self.muscles.len()
    }

    /// Unconstrained flesh vertices, sorted.
    pub fn unconstrained(&self) -> Vec<usize> {
        let mut is_constrained = vec![false; self.flesh.num_vertices()];
        for &c in &self.constrained {
            is_constrained[c] = true;
        }
        (0..self.flesh.num_vertices())
            .filter(|&v| !is_constrained[v])
            .collect()
    }
}

/// Rest field, per-shape fields, and volumetric skin weights at a set of points.
#[derive(Debug, Clone, PartialEq)]
pub struct PointBasis {
    pub rest: Vec<Vec3>,
    /// `shapes[k][i]`.
    pub shapes: Vec<Vec<Vec3>>,
    pub weights: Vec<f64>,
}

impl PointBasis {
    pub fn len(&self) -> usize {
        self.rest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rest.is_empty()
    }

    pub fn pre_skinning(&self, b: &[f64]) -> Vec<Vec3> {
        let mut out = self.rest.clone();
        for (shape, &bk) in self.shapes.iter().zip(b) {
            if bk != 0.0 {
                for (o, d) in out.iter_mut().zip(shape) {
                    *o += d * bk;
                }
            }
        }
        out
    }

    pub fn evaluate(&self, jaw: &JawJoint, b: &[f64], j: &JawParams) -> Vec<Vec3> {
        let pre = self.pre_skinning(b);
        if j.is_zero() {
            return pre;
        }
        let t = jaw.transform(j);
        pre.iter()
            .zip(&self.weights)
            .map(|(p, &w)| t.apply(w, p))
            .collect()
    }

    /// `∂(points)/∂(b, j)` as `cols[param][point]`.
    pub fn jacobian(&self, jaw: &JawJoint, b: &[f64], j: &JawParams) -> Vec<Vec<Vec3>> {
        let k = self.shapes.len();
        let t = jaw.transform(j);
        let pre = self.pre_skinning(b);
        let mut cols = vec![vec![Vec3::zeros(); self.len()]; k + JAW_DOF];
        for i in 0..self.len() {
            let w = self.weights[i];
            let lin = t.linear(w);
            for s in 0..k {
                cols[s][i] = lin * self.shapes[s][i];
            }
            for (p, d) in t.param_derivatives(w, &pre[i]).iter().enumerate() {
                cols[k + p][i] = *d;
            }
        }
        cols
    }

    fn sample(
        rest_positions: &[Vec3],
        displacements: &[Vec<Vec3>],
        weights: &[f64],
        embedding: &Embedding,
    ) -> Self {
        Self {
            rest: embedding.reconstruct(rest_positions),
            shapes: displacements
                .iter()
                .map(|d| embedding.reconstruct(d))
                .collect(),
            weights: embedding
                .points
                .iter()
                .map(|p| p.interpolate(weights).clamp(0.0, 1.0))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MuscleBasis {
    /// At the muscle's member vertices.
    pub targets: PointBasis,
    /// At the center-line curve points.
    pub curve: PointBasis,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrecomputedMuscleBasis {
    pub shape_names: Vec<String>,
    pub jaw: JawJoint,
    pub muscles: Vec<MuscleBasis>,
    /// Volumetric jaw weight at every flesh vertex.
    pub flesh_weights: Vec<f64>,
    /// Harmonic extension `δX_k` of each blendshape, at every flesh vertex.
    pub flesh_displacements: Vec<Vec<Vec3>>,
    pub flesh_rest: Vec<Vec3>,
}

impl PrecomputedMuscleBasis {
    pub fn num_shapes(&self) -> usize {
        self.shape_names.len()
    }

    pub fn num_params(&self) -> usize {
        self.num_shapes() + JAW_DOF
    }

    pub fn check_shapes(&self, b: &[f64]) -> Result<(), AnatomyError> {
        if b.len() != self.num_shapes() {
            return Err(AnatomyError::ShapeCount {
                expected: self.num_shapes(),
                got: b.len(),
            });
        }
        Ok(())
    }

    pub fn targets(&self, m: usize, b: &[f64], j: &JawParams) -> Vec<Vec3> {
        self.muscles[m].targets.evaluate(&self.jaw, b, j)
    }

    pub fn curve(&self, m: usize, b: &[f64], j: &JawParams) -> Vec<Vec3> {
        self.muscles[m].curve.evaluate(&self.jaw, b, j)
    }

    /// Morphed and skinned flesh, `T(j)(X_0 + Σ_k δX_k b_k)`, at every vertex.
    pub fn morph(&self, b: &[f64], j: &JawParams) -> Vec<Vec3> {
        let mut pre = self.flesh_rest.clone();
        for (d, &bk) in self.flesh_displacements.iter().zip(b) {
            if bk != 0.0 {
                for (p, dv) in pre.iter_mut().zip(d) {
                    *p += dv * bk;
                }
            }
        }
        if j.is_zero() {
            return pre;
        }
        let t = self.jaw.transform(j);
        pre.iter()
            .zip(&self.flesh_weights)
            .map(|(p, &w)| t.apply(w, p))
            .collect()
    }
}

/// Per-muscle target positions `M_m(b, j)`.
pub fn muscle_targets(
    basis: &PrecomputedMuscleBasis,
    b: &[f64],
    j: &JawParams,
) -> Result<Vec<Vec<Vec3>>, AnatomyError> {
    basis.check_shapes(b)?;
    Ok((0..basis.muscles.len())
        .map(|m| basis.targets(m, b, j))
        .collect())
}

/// Per-muscle center-line curves `C_m(b, j)`.
pub fn muscle_curves(
    basis: &PrecomputedMuscleBasis,
    b: &[f64],
    j: &JawParams,
) -> Result<Vec<Vec<Vec3>>, AnatomyError> {
    basis.check_shapes(b)?;
    Ok((0..basis.muscles.len())
        .map(|m| basis.curve(m, b, j))
        .collect())
}

/// Activations and their length slopes `(a_m, da_m/dL_m, L_m)` at `(b, j)`.
pub fn muscle_activations(
    muscles: &[Muscle],
    basis: &PrecomputedMuscleBasis,
    b: &[f64],
    j: &JawParams,
) -> Vec<(f64, f64, f64)> {
    muscles
        .iter()
        .enumerate()
        .map(|(m, muscle)| {
            let l = curve_length(&basis.curve(m, b, j));
            let (a, da) = muscle.activation_curve().evaluate(l);
            (a, da, l)
        })
        .collect()
}

/// Maps rig surface vertex values onto the Laplacian's constrained vertices.
fn boundary_order(
    laplacian: &VolumetricLaplacian,
    rig_vertices: usize,
) -> Result<Vec<usize>, AnatomyError> {
    let corr = laplacian.surface_correspondence();
    if corr.len() != rig_vertices {
        return Err(AnatomyError::Correspondence {
            expected: rig_vertices,
            got: corr.len(),
        });
    }
    let mut surface_of = vec![usize::MAX; laplacian.num_vertices()];
    for (s, &f) in corr.iter().enumerate() {
        if f < surface_of.len() {
            surface_of[f] = s;
        }
    }
    laplacian
        .constrained()
        .iter()
        .map(|&c| match surface_of[c] {
            usize::MAX => Err(AnatomyError::UnmappedBoundary(c)),
            s => Ok(s),
        })
        .collect()
}

/// Solves one Poisson problem per blendshape and samples the resulting
/// displacement fields at muscle vertices and curve points.
///
/// `laplacian` must constrain exactly the outer boundary and carry the
/// surface correspondence.
pub fn precompute_basis(
    flesh: &TetMesh,
    rig: &Rig,
    muscles: &[Muscle],
    laplacian: &VolumetricLaplacian,
) -> Result<PrecomputedMuscleBasis, AnatomyError> {
    let order = boundary_order(laplacian, rig.num_vertices())?;
    let skin: Vec<f64> = order.iter().map(|&s| rig.skin.0[s]).collect();
    let flesh_weights = laplacian
        .extend_scalar(&skin)
        .map_err(AnatomyError::SkinSolve)?;
    let flesh_displacements = (0..rig.num_shapes())
        .map(|k| {
            let d: Vec<Vec3> = order.iter().map(|&s| rig.shapes.deltas[k][s]).collect();
            laplacian
                .extend(&d)
                .map_err(|source| AnatomyError::ShapeSolve { shape: k, source })
        })
        .collect::<Result<Vec<_>, _>>()?;
    from_displacements(flesh, rig, muscles, flesh_weights, flesh_displacements)
}

/// Assembles the basis from already-solved per-shape displacement fields.
pub fn from_displacements(
    flesh: &TetMesh,
    rig: &Rig,
    muscles: &[Muscle],
    flesh_weights: Vec<f64>,
    flesh_displacements: Vec<Vec<Vec3>>,
) -> Result<PrecomputedMuscleBasis, AnatomyError> {
    let rest = flesh.vertices();
    let muscles = muscles
        .iter()
        .enumerate()
        .map(|(m, muscle)| {
            let members = Embedding::of_vertices(flesh, &muscle.vertices)
                .map_err(|source| AnatomyError::Embedding { muscle: m, source })?;
            Ok(MuscleBasis {
                targets: PointBasis::sample(rest, &flesh_displacements, &flesh_weights, &members),
                curve: PointBasis::sample(
                    rest,
                    &flesh_displacements,
                    &flesh_weights,
                    &muscle.curve_embedding,
                ),
            })
        })
        .collect::<Result<Vec<_>, AnatomyError>>()?;
    Ok(PrecomputedMuscleBasis {
        shape_names: rig.shapes.names.clone(),
        jaw: rig.jaw,
        muscles,
        flesh_weights,
        flesh_displacements,
        flesh_rest: rest.to_vec(),
    })
}
