//! Hybrid blendshape + linear-blend-skinning surface deformer.
//!
//! `x(w) = T(j(w)) (n + B b(w))`, with a single six-parameter jaw joint blended
//! against the fixed cranium frame by a per-vertex weight.

use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{DMatrix, Matrix3};
use thiserror::Error;

use crate::geometry::Vec3;
use crate::rotation::{euler_xyz, euler_xyz_derivatives};

/// Number of jaw parameters: three XYZ Euler angles (radians), then a translation.
pub const JAW_DOF: usize = 6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RigError {
    #[error("rig needs at least one blendshape")]
    NoShapes,
    #[error("blendshape {shape} has {got} deltas, neutral has {expected} vertices")]
    DeltaCount {
        shape: usize,
        expected: usize,
        got: usize,
    },
    #[error("blendshape {0} has non-finite entries")]
    NonFinite(usize),
    #[error("skin weight {index} = {value} is outside [0, 1]")]
    SkinWeightRange { index: usize, value: f64 },
    #[error("{got} skin weights for {expected} vertices")]
    SkinWeightCount { expected: usize, got: usize },
    #[error("control vector has {got} entries, expected {expected}")]
    ControlCount { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blendshapes {
    pub names: Vec<String>,
    pub neutral: Vec<Vec3>,
    /// One displacement field per shape.
    pub deltas: Vec<Vec<Vec3>>,
}

impl Blendshapes {
    pub fn new(
        names: Vec<String>,
        neutral: Vec<Vec3>,
        deltas: Vec<Vec<Vec3>>,
    ) -> Result<Self, RigError> {
        if deltas.is_empty() {
            return Err(RigError::NoShapes);
        }
        for (k, d) in deltas.iter().enumerate() {
            if d.len() != neutral.len() {
                return Err(RigError::DeltaCount {
                    shape: k,
                    expected: neutral.len(),
                    got: d.len(),
                });
            }
            if d.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
                return Err(RigError::NonFinite(k));
            }
        }
        Ok(Self {
            names,
            neutral,
            deltas,
        })
    }

    pub fn num_shapes(&self) -> usize {
        self.deltas.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.neutral.len()
    }

    /// Pre-skinning shape `n + B b`.
    pub fn pre_skinning(&self, b: &[f64]) -> Vec<Vec3> {
        let mut out = self.neutral.clone();
        for (delta, &bk) in self.deltas.iter().zip(b) {
            if bk != 0.0 {
                for (o, d) in out.iter_mut().zip(delta) {
                    *o += d * bk;
                }
            }
        }
        out
    }
}

/// Jaw joint parameter vector `j`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct JawParams(pub [f64; JAW_DOF]);

impl JawParams {
    pub fn from_slice(s: &[f64]) -> Self {
        let mut j = [0.0; JAW_DOF];
        j.copy_from_slice(&s[..JAW_DOF]);
        Self(j)
    }

    pub fn angles(&self) -> Vec3 {
        Vec3::new(self.0[0], self.0[1], self.0[2])
    }

    pub fn translation(&self) -> Vec3 {
        Vec3::new(self.0[3], self.0[4], self.0[5])
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }
}

/// The jaw joint: rotation about `pivot`, then translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JawJoint {
    pub pivot: Vec3,
}

/// Evaluated jaw transform with its parameter derivatives.
#[derive(Debug, Clone, Copy)]
pub struct JawTransform {
    pub pivot: Vec3,
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
    pub d_rotation: [Matrix3<f64>; 3],
}

impl JawJoint {
    pub fn transform(&self, j: &JawParams) -> JawTransform {
        let a = j.angles();
        JawTransform {
            pivot: self.pivot,
            rotation: euler_xyz(&a),
            translation: j.translation(),
            d_rotation: euler_xyz_derivatives(&a),
        }
    }
}

impl JawTransform {
    /// Blends the jaw transform against the identity with weight `w`.
    #[inline]
    pub fn apply(&self, w: f64, p: &Vec3) -> Vec3 {
        let jaw = self.rotation * (p - self.pivot) + self.pivot + self.translation;
        p * (1.0 - w) + jaw * w
    }

    /// Linear part `(1 − w) I + w R`, i.e. how pre-skinning displacements map.
    #[inline]
    pub fn linear(&self, w: f64) -> Matrix3<f64> {
        Matrix3::identity() * (1.0 - w) + self.rotation * w
    }

    /// `∂(apply(w, p))/∂j_k` for the six jaw parameters.
    #[inline]
    pub fn param_derivatives(&self, w: f64, p: &Vec3) -> [Vec3; JAW_DOF] {
        let r = p - self.pivot;
        [
            self.d_rotation[0] * r * w,
            self.d_rotation[1] * r * w,
            self.d_rotation[2] * r * w,
            Vec3::x() * w,
            Vec3::y() * w,
            Vec3::z() * w,
        ]
    }
}

/// Per-vertex jaw weights in `[0, 1]`; zero follows the cranium.
#[derive(Debug, Clone, PartialEq)]
pub struct SkinWeights(pub Vec<f64>);

impl SkinWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self, RigError> {
        if let Some((index, &value)) = weights
            .iter()
            .enumerate()
            .find(|(_, w)| !(0.0..=1.0).contains(*w))
        {
            return Err(RigError::SkinWeightRange { index, value });
        }
        Ok(Self(weights))
    }
}

/// Applies the blended jaw transform to every pre-skinning point.
pub fn skin_transform(
    joint: &JawJoint,
    j: &JawParams,
    weights: &SkinWeights,
    pre_skin: &[Vec3],
) -> Vec<Vec3> {
    if j.is_zero() {
        return pre_skin.to_vec();
    }
    let t = joint.transform(j);
    pre_skin
        .iter()
        .zip(&weights.0)
        .map(|(p, &w)| t.apply(w, p))
        .collect()
}

/// Mapping from animator controls `w` to blendshape weights and jaw parameters.
pub trait ControlMap {
    fn num_controls(&self) -> usize;
    fn num_shapes(&self) -> usize;
    /// Returns `(b, j)`.
    fn evaluate(&self, w: &[f64]) -> (Vec<f64>, JawParams);
    /// `∂(b, j)/∂w`, `(K + 6) × |w|`.
    fn jacobian(&self, w: &[f64]) -> DMatrix<f64>;
}

/// `w = (b, j)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityControls {
    pub num_shapes: usize,
}

impl ControlMap for IdentityControls {
    fn num_controls(&self) -> usize {
        self.num_shapes + JAW_DOF
    }

    fn num_shapes(&self) -> usize {
        self.num_shapes
    }

    fn evaluate(&self, w: &[f64]) -> (Vec<f64>, JawParams) {
        (
            w[..self.num_shapes].to_vec(),
            JawParams::from_slice(&w[self.num_shapes..]),
        )
    }

    fn jacobian(&self, _w: &[f64]) -> DMatrix<f64> {
        let n = self.num_controls();
        DMatrix::identity(n, n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rig {
    pub shapes: Blendshapes,
    pub triangles: Vec<[usize; 3]>,
    pub jaw: JawJoint,
    pub skin: SkinWeights,
}

impl Rig {
    pub fn new(
        shapes: Blendshapes,
        triangles: Vec<[usize; 3]>,
        jaw: JawJoint,
        skin: SkinWeights,
    ) -> Result<Self, RigError> {
        if skin.0.len() != shapes.num_vertices() {
            return Err(RigError::SkinWeightCount {
                expected: shapes.num_vertices(),
                got: skin.0.len(),
            });
        }
        Ok(Self {
            shapes,
            triangles,
            jaw,
            skin,
        })
    }

    pub fn num_shapes(&self) -> usize {
        self.shapes.num_shapes()
    }

    pub fn num_vertices(&self) -> usize {
        self.shapes.num_vertices()
    }

    pub fn identity_controls(&self) -> IdentityControls {
        IdentityControls {
            num_shapes: self.num_shapes(),
        }
    }

    /// `T(j)(n + Bb)`.
    pub fn surface(&self, b: &[f64], j: &JawParams) -> Vec<Vec3> {
        skin_transform(&self.jaw, j, &self.skin, &self.shapes.pre_skinning(b))
    }

    /// `∂x/∂(b, j)`, `3V × (K + 6)`.
    pub fn surface_param_jacobian(&self, b: &[f64], j: &JawParams) -> DMatrix<f64> {
        let k = self.num_shapes();
        let nv = self.num_vertices();
        let t = self.jaw.transform(j);
        let pre = self.shapes.pre_skinning(b);
        let mut jac = DMatrix::zeros(3 * nv, k + JAW_DOF);
        for v in 0..nv {
            let w = self.skin.0[v];
            let lin = t.linear(w);
            for s in 0..k {
                let col = lin * self.shapes.deltas[s][v];
                for a in 0..3 {
                    jac[(3 * v + a, s)] = col[a];
                }
            }
            for (p, d) in t.param_derivatives(w, &pre[v]).iter().enumerate() {
                for a in 0..3 {
                    jac[(3 * v + a, k + p)] = d[a];
                }
            }
        }
        jac
    }
}

pub fn evaluate_surface<C: ControlMap + ?Sized>(
    rig: &Rig,
    controls: &C,
    w: &[f64],
) -> Result<Vec<Vec3>, RigError> {
    check_controls(controls, w)?;
    let (b, j) = controls.evaluate(w);
    Ok(rig.surface(&b, &j))
}

/// `∂x/∂w`, `3V × |w|`.
pub fn surface_jacobian<C: ControlMap + ?Sized>(
    rig: &Rig,
    controls: &C,
    w: &[f64],
) -> Result<DMatrix<f64>, RigError> {
    check_controls(controls, w)?;
    let (b, j) = controls.evaluate(w);
    Ok(rig.surface_param_jacobian(&b, &j) * controls.jacobian(w))
}

fn check_controls<C: ControlMap + ?Sized>(controls: &C, w: &[f64]) -> Result<(), RigError> {
    if w.len() != controls.num_controls() {
        return Err(RigError::ControlCount {
            expected: controls.num_controls(),
            got: w.len(),
        });
    }
    Ok(())
}
