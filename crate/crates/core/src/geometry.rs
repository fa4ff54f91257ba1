//! Tetrahedral and triangle meshes, deformation gradients, the volumetric
//! Laplacian used for harmonic morphs, barycentric embeddings, and analytic
//! collision proxies.

use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::linalg::{CsrMatrix, EnvelopeCholesky, LinalgError, TripletBuilder};

pub type Vec3 = Vector3<f64>;

/// Barycentric weights may be this far below zero for points sitting on a face.
pub const BARYCENTRIC_TOLERANCE: f64 = 1e-8;
/// Points farther than this (length units) from every tet cannot be embedded.
pub const EMBEDDING_DISTANCE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("tet {tet} references vertex {vertex} but the mesh has {count} vertices")]
    InvalidIndex {
        tet: usize,
        vertex: usize,
        count: usize,
    },
    #[error("tet index {0} out of range")]
    InvalidTet(usize),
    #[error("tet {tet} is inverted or degenerate (rest volume {volume:e}, mean {mean:e})")]
    DegenerateTet { tet: usize, volume: f64, mean: f64 },
    #[error("vertex {0} is on both the outer and the inner boundary")]
    OverlappingBoundaries(usize),
    #[error("position array has {got} entries, mesh has {expected} vertices")]
    PositionCount { expected: usize, got: usize },
    #[error("the constrained vertex set is empty")]
    NoConstraints,
    #[error("constrained vertex {0} is out of range")]
    InvalidConstraint(usize),
    #[error("point {index} lies {distance:e} outside the mesh")]
    OutsideMesh { index: usize, distance: f64 },
    #[error("Dirichlet data has {got} entries, {expected} constrained vertices")]
    DirichletCount { expected: usize, got: usize },
    #[error("Poisson solve did not converge (relative residual {residual:e})")]
    PoissonNonConvergence { residual: f64 },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// A rest-state tetrahedral flesh mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct TetMesh {
    vertices: Vec<Vec3>,
    tets: Vec<[usize; 4]>,
    rest_volumes: Vec<f64>,
    rest_shape_inverse: Vec<Matrix3<f64>>,
    boundary: Vec<usize>,
    boundary_triangles: Vec<[usize; 3]>,
    inner_boundary: Vec<usize>,
}

fn edge_matrix(x: &[Vec3], t: &[usize; 4]) -> Matrix3<f64> {
    let x0 = x[t[0]];
    Matrix3::from_columns(&[x[t[1]] - x0, x[t[2]] - x0, x[t[3]] - x0])
}

impl TetMesh {
    /// Builds a mesh and its rest-state data. `boundary` is the outer-boundary
    /// vertex set, `inner_boundary` the flesh/bone interface.
    pub fn new(
        vertices: Vec<Vec3>,
        tets: Vec<[usize; 4]>,
        mut boundary: Vec<usize>,
        boundary_triangles: Vec<[usize; 3]>,
        mut inner_boundary: Vec<usize>,
    ) -> Result<Self, GeometryError> {
        let n = vertices.len();
        for (ti, t) in tets.iter().enumerate() {
            if let Some(&v) = t.iter().find(|&&v| v >= n) {
                return Err(GeometryError::InvalidIndex {
                    tet: ti,
                    vertex: v,
                    count: n,
                });
            }
        }
        for tri in &boundary_triangles {
            if let Some(&v) = tri.iter().find(|&&v| v >= n) {
                return Err(GeometryError::InvalidConstraint(v));
            }
        }
        boundary.sort_unstable();
        boundary.dedup();
        inner_boundary.sort_unstable();
        inner_boundary.dedup();
        if let Some(&v) = boundary.iter().chain(&inner_boundary).find(|&&v| v >= n) {
            return Err(GeometryError::InvalidConstraint(v));
        }
        if let Some(&v) = boundary
            .iter()
            .find(|v| inner_boundary.binary_search(v).is_ok())
        {
            return Err(GeometryError::OverlappingBoundaries(v));
        }

        let mut rest_volumes = Vec::with_capacity(tets.len());
        let mut rest_shape_inverse = Vec::with_capacity(tets.len());
        for t in &tets {
            let dm = edge_matrix(&vertices, t);
            rest_volumes.push(dm.determinant() / 6.0);
            rest_shape_inverse.push(dm.try_inverse().unwrap_or_else(Matrix3::zeros));
        }
        let mean = rest_volumes.iter().map(|v| v.abs()).sum::<f64>() / tets.len().max(1) as f64;
        for (ti, &v) in rest_volumes.iter().enumerate() {
            if !(v > 1e-12 * mean) {
                return Err(GeometryError::DegenerateTet {
                    tet: ti,
                    volume: v,
                    mean,
                });
            }
        }
        Ok(Self {
            vertices,
            tets,
            rest_volumes,
            rest_shape_inverse,
            boundary,
            boundary_triangles,
            inner_boundary,
        })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn tets(&self) -> &[[usize; 4]] {
        &self.tets
    }

    pub fn rest_volumes(&self) -> &[f64] {
        &self.rest_volumes
    }

    pub fn rest_shape_inverse(&self) -> &[Matrix3<f64>] {
        &self.rest_shape_inverse
    }

    /// Sorted outer-boundary vertex indices.
    pub fn boundary(&self) -> &[usize] {
        &self.boundary
    }

    pub fn boundary_triangles(&self) -> &[[usize; 3]] {
        &self.boundary_triangles
    }

    /// Sorted inner-boundary (flesh/bone interface) vertex indices.
    pub fn inner_boundary(&self) -> &[usize] {
        &self.inner_boundary
    }

    pub fn total_rest_volume(&self) -> f64 {
        self.rest_volumes.iter().sum()
    }

    /// Signed volume of the mesh at `positions`.
    pub fn volume(&self, positions: &[Vec3]) -> f64 {
        self.tets
            .iter()
            .map(|t| edge_matrix(positions, t).determinant() / 6.0)
            .sum()
    }

    /// Signed volume of a subset of tets at `positions`.
    pub fn volume_of(&self, tets: &[usize], positions: &[Vec3]) -> f64 {
        tets.iter()
            .map(|&t| edge_matrix(positions, &self.tets[t]).determinant() / 6.0)
            .sum()
    }

    pub fn centroid(&self, tet: usize) -> Vec3 {
        let t = &self.tets[tet];
        (self.vertices[t[0]] + self.vertices[t[1]] + self.vertices[t[2]] + self.vertices[t[3]])
            / 4.0
    }

    /// Axis-aligned bounding-box diagonal length of the rest mesh.
    pub fn bounding_box_diagonal(&self) -> f64 {
        bounding_box_diagonal(&self.vertices)
    }
}

pub fn bounding_box_diagonal(points: &[Vec3]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let mut lo = points[0];
    let mut hi = points[0];
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (hi - lo).norm()
}

/// `F = D_s · D_m⁻¹` for one tet.
pub fn deformation_gradient(
    mesh: &TetMesh,
    positions: &[Vec3],
    tet: usize,
) -> Result<Matrix3<f64>, GeometryError> {
    if positions.len() != mesh.num_vertices() {
        return Err(GeometryError::PositionCount {
            expected: mesh.num_vertices(),
            got: positions.len(),
        });
    }
    let t = mesh.tets.get(tet).ok_or(GeometryError::InvalidTet(tet))?;
    Ok(edge_matrix(positions, t) * mesh.rest_shape_inverse[tet])
}

/// Gradients of the four linear shape functions of a tet, given `D_m⁻¹`.
pub fn shape_function_gradients(dm_inv: &Matrix3<f64>) -> [Vec3; 4] {
    let g1: Vec3 = dm_inv.row(0).transpose();
    let g2: Vec3 = dm_inv.row(1).transpose();
    let g3: Vec3 = dm_inv.row(2).transpose();
    [-(g1 + g2 + g3), g1, g2, g3]
}

/// Triangle surface with per-vertex normals.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    pub normals: Vec<Vec3>,
}

impl SurfaceMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Self {
        let normals = vertex_normals(&vertices, &triangles);
        Self {
            vertices,
            triangles,
            normals,
        }
    }

    pub fn set_positions(&mut self, positions: Vec<Vec3>) {
        self.normals = vertex_normals(&positions, &self.triangles);
        self.vertices = positions;
    }

    /// Vertex adjacency lists from the triangle edges, each sorted.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.vertices.len()];
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                adj[a].push(b);
                adj[b].push(a);
            }
        }
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
        }
        adj
    }
}

/// Unnormalized area-weighted normal accumulators.
fn normal_accumulators(positions: &[Vec3], triangles: &[[usize; 3]]) -> Vec<Vec3> {
    let mut acc = vec![Vec3::zeros(); positions.len()];
    for t in triangles {
        let e1 = positions[t[1]] - positions[t[0]];
        let e2 = positions[t[2]] - positions[t[0]];
        let m = e1.cross(&e2);
        for &v in t {
            acc[v] += m;
        }
    }
    acc
}

/// Area-weighted unit vertex normals. Isolated vertices get `+z`.
pub fn vertex_normals(positions: &[Vec3], triangles: &[[usize; 3]]) -> Vec<Vec3> {
    normal_accumulators(positions, triangles)
        .into_iter()
        .map(|m| {
            let len = m.norm();
            if len > 0.0 {
                m / len
            } else {
                Vec3::z()
            }
        })
        .collect()
}

fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Sparse Jacobian of the unit vertex normals: for each vertex `i`, a list of
/// `(j, ∂n_i/∂x_j)`.
pub fn vertex_normal_jacobians(
    positions: &[Vec3],
    triangles: &[[usize; 3]],
) -> Vec<Vec<(usize, Matrix3<f64>)>> {
    let acc = normal_accumulators(positions, triangles);
    let mut dm: Vec<Vec<(usize, Matrix3<f64>)>> = vec![Vec::new(); positions.len()];
    for t in triangles {
        let e1 = positions[t[1]] - positions[t[0]];
        let e2 = positions[t[2]] - positions[t[0]];
        let db = -skew(&e2);
        let dc = skew(&e1);
        let da = -(db + dc);
        for &v in t {
            dm[v].push((t[0], da));
            dm[v].push((t[1], db));
            dm[v].push((t[2], dc));
        }
    }
    dm.into_iter()
        .enumerate()
        .map(|(i, mut entries)| {
            let len = acc[i].norm();
            if len == 0.0 {
                return Vec::new();
            }
            let n = acc[i] / len;
            let proj = (Matrix3::identity() - n * n.transpose()) / len;
            entries.sort_by_key(|e| e.0);
            let mut merged: Vec<(usize, Matrix3<f64>)> = Vec::new();
            for (j, m) in entries {
                match merged.last_mut() {
                    Some((k, acc)) if *k == j => *acc += m,
                    _ => merged.push((j, m)),
                }
            }
            merged.into_iter().map(|(j, m)| (j, proj * m)).collect()
        })
        .collect()
}

/// One embedded point: its tet, the tet's vertex indices, and barycentric weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbeddedPoint {
    pub tet: usize,
    pub nodes: [usize; 4],
    pub weights: [f64; 4],
}

impl EmbeddedPoint {
    pub fn reconstruct(&self, positions: &[Vec3]) -> Vec3 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .fold(Vec3::zeros(), |acc, (&n, &w)| acc + positions[n] * w)
    }

    /// Same for scalar per-vertex data.
    pub fn interpolate(&self, values: &[f64]) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&n, &w)| values[n] * w)
            .sum()
    }
}

/// Linear map from flesh vertex positions to embedded points.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Embedding {
    pub points: Vec<EmbeddedPoint>,
}

impl Embedding {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn reconstruct(&self, positions: &[Vec3]) -> Vec<Vec3> {
        self.points
            .iter()
            .map(|p| p.reconstruct(positions))
            .collect()
    }

    /// Embedding that picks mesh vertices directly (weight 1 on the vertex).
    pub fn of_vertices(mesh: &TetMesh, vertices: &[usize]) -> Result<Self, GeometryError> {
        let n = mesh.num_vertices();
        let mut owner = vec![usize::MAX; n];
        for (ti, t) in mesh.tets.iter().enumerate() {
            for &v in t {
                if owner[v] == usize::MAX {
                    owner[v] = ti;
                }
            }
        }
        vertices
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if v >= n || owner[v] == usize::MAX {
                    return Err(GeometryError::OutsideMesh {
                        index: i,
                        distance: f64::INFINITY,
                    });
                }
                let tet = owner[v];
                let nodes = mesh.tets[tet];
                let mut weights = [0.0; 4];
                for k in 0..4 {
                    if nodes[k] == v {
                        weights[k] = 1.0;
                    }
                }
                Ok(EmbeddedPoint {
                    tet,
                    nodes,
                    weights,
                })
            })
            .collect::<Result<Vec<_>, _>>()
            .map(|points| Self { points })
    }
}

fn barycentric(mesh: &TetMesh, tet: usize, p: &Vec3) -> [f64; 4] {
    let t = &mesh.tets[tet];
    let local = mesh.rest_shape_inverse[tet] * (p - mesh.vertices[t[0]]);
    [1.0 - local.x - local.y - local.z, local.x, local.y, local.z]
}

/// Distance from `p` to the outside of the tet, estimated from the barycentric
/// weights and the face heights; zero inside.
fn outside_distance(mesh: &TetMesh, tet: usize, w: &[f64; 4]) -> f64 {
    let grads = shape_function_gradients(&mesh.rest_shape_inverse[tet]);
    (0..4)
        .map(|k| {
            if w[k] < 0.0 {
                -w[k] / grads[k].norm()
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max)
}

/// Barycentric embedding of points into the rest mesh.
pub fn embed(points: &[Vec3], mesh: &TetMesh) -> Result<Embedding, GeometryError> {
    let mut out = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let mut best: Option<(f64, usize, [f64; 4])> = None;
        for tet in 0..mesh.tets.len() {
            let w = barycentric(mesh, tet, p);
            let d = if w.iter().all(|&x| x >= -BARYCENTRIC_TOLERANCE) {
                0.0
            } else {
                outside_distance(mesh, tet, &w)
            };
            if best.map_or(true, |b| d < b.0) {
                best = Some((d, tet, w));
                if d == 0.0 {
                    break;
                }
            }
        }
        match best {
            Some((d, tet, weights)) if d <= EMBEDDING_DISTANCE_TOLERANCE => {
                out.push(EmbeddedPoint {
                    tet,
                    nodes: mesh.tets[tet],
                    weights,
                })
            }
            Some((d, ..)) => {
                return Err(GeometryError::OutsideMesh {
                    index: i,
                    distance: d,
                })
            }
            None => {
                return Err(GeometryError::OutsideMesh {
                    index: i,
                    distance: f64::INFINITY,
                })
            }
        }
    }
    Ok(Embedding { points: out })
}

/// Piecewise-linear FEM Laplacian on the rest tet mesh, partitioned by a
/// Dirichlet vertex set.
///
/// The harmonic extension solves `A^U δX = A^C d` where `A^U = L_UU` and
/// `A^C = −L_UC`. Vertices outside the constrained set get natural (zero-flux)
/// conditions.
#[derive(Debug, Clone)]
pub struct VolumetricLaplacian {
    full: CsrMatrix,
    constrained: Vec<usize>,
    unconstrained: Vec<usize>,
    a_u: CsrMatrix,
    a_c: CsrMatrix,
    factor: EnvelopeCholesky,
    surface_correspondence: Vec<usize>,
}

/// Assembles the Laplacian and factors its unconstrained block.
pub fn assemble_laplacian(
    mesh: &TetMesh,
    constrained: &[usize],
) -> Result<VolumetricLaplacian, GeometryError> {
    let n = mesh.num_vertices();
    if constrained.is_empty() {
        return Err(GeometryError::NoConstraints);
    }
    let mut constrained = constrained.to_vec();
    constrained.sort_unstable();
    constrained.dedup();
    if let Some(&v) = constrained.iter().find(|&&v| v >= n) {
        return Err(GeometryError::InvalidConstraint(v));
    }
    let mean = mesh.total_rest_volume() / mesh.tets.len() as f64;
    let mut t = TripletBuilder::with_capacity(n, n, 16 * mesh.tets.len());
    for (ti, tet) in mesh.tets.iter().enumerate() {
        let vol = mesh.rest_volumes[ti];
        if !(vol > 1e-12 * mean) {
            return Err(GeometryError::DegenerateTet {
                tet: ti,
                volume: vol,
                mean,
            });
        }
        let g = shape_function_gradients(&mesh.rest_shape_inverse[ti]);
        for a in 0..4 {
            for b in 0..4 {
                t.push(tet[a], tet[b], vol * g[a].dot(&g[b]));
            }
        }
    }
    let full = t.build();
    let mut is_constrained = vec![false; n];
    for &c in &constrained {
        is_constrained[c] = true;
    }
    let unconstrained: Vec<usize> = (0..n).filter(|&v| !is_constrained[v]).collect();
    let a_u = full.select(&unconstrained, &unconstrained);
    let l_uc = full.select(&unconstrained, &constrained);
    let mut neg = TripletBuilder::new(l_uc.rows(), l_uc.cols());
    for r in 0..l_uc.rows() {
        for (c, v) in l_uc.row(r) {
            neg.push(r, c, -v);
        }
    }
    let a_c = neg.build();
    let factor = EnvelopeCholesky::factor(&a_u)?;
    Ok(VolumetricLaplacian {
        full,
        constrained,
        unconstrained,
        a_u,
        a_c,
        factor,
        surface_correspondence: Vec::new(),
    })
}

impl VolumetricLaplacian {
    /// Attaches the surface-vertex → flesh-vertex correspondence.
    pub fn with_surface_correspondence(mut self, map: Vec<usize>) -> Self {
        self.surface_correspondence = map;
        self
    }

    pub fn surface_correspondence(&self) -> &[usize] {
        &self.surface_correspondence
    }

    pub fn full(&self) -> &CsrMatrix {
        &self.full
    }

    pub fn unconstrained_block(&self) -> &CsrMatrix {
        &self.a_u
    }

    pub fn constrained_block(&self) -> &CsrMatrix {
        &self.a_c
    }

    /// Sorted Dirichlet vertex indices.
    pub fn constrained(&self) -> &[usize] {
        &self.constrained
    }

    pub fn unconstrained(&self) -> &[usize] {
        &self.unconstrained
    }

    pub fn num_vertices(&self) -> usize {
        self.full.rows()
    }

    /// Scalar harmonic extension: values at the unconstrained vertices.
    pub fn solve_scalar(&self, dirichlet: &[f64]) -> Result<Vec<f64>, GeometryError> {
        if dirichlet.len() != self.constrained.len() {
            return Err(GeometryError::DirichletCount {
                expected: self.constrained.len(),
                got: dirichlet.len(),
            });
        }
        let rhs = self.a_c.mul_vec(dirichlet);
        let rhs_norm = crate::linalg::norm2(&rhs);
        if rhs_norm == 0.0 {
            return Ok(vec![0.0; self.unconstrained.len()]);
        }
        let x = self.factor.solve(&rhs);
        let ax = self.a_u.mul_vec(&x);
        let res = ax
            .iter()
            .zip(&rhs)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
            / rhs_norm;
        if !(res < 1e-10) {
            return Err(GeometryError::PoissonNonConvergence { residual: res });
        }
        Ok(x)
    }

    /// Scalar harmonic extension returned on every mesh vertex.
    pub fn extend_scalar(&self, dirichlet: &[f64]) -> Result<Vec<f64>, GeometryError> {
        let inner = self.solve_scalar(dirichlet)?;
        let mut out = vec![0.0; self.num_vertices()];
        for (k, &v) in self.constrained.iter().enumerate() {
            out[v] = dirichlet[k];
        }
        for (k, &v) in self.unconstrained.iter().enumerate() {
            out[v] = inner[k];
        }
        Ok(out)
    }

    /// Vector harmonic extension: values at the unconstrained vertices.
    pub fn solve_poisson(&self, dirichlet: &[Vec3]) -> Result<Vec<Vec3>, GeometryError> {
        let mut out = vec![Vec3::zeros(); self.unconstrained.len()];
        for axis in 0..3 {
            let d: Vec<f64> = dirichlet.iter().map(|v| v[axis]).collect();
            let x = self.solve_scalar(&d)?;
            for (o, xi) in out.iter_mut().zip(x) {
                o[axis] = xi;
            }
        }
        Ok(out)
    }

    /// Vector harmonic extension returned on every mesh vertex.
    pub fn extend(&self, dirichlet: &[Vec3]) -> Result<Vec<Vec3>, GeometryError> {
        let inner = self.solve_poisson(dirichlet)?;
        let mut out = vec![Vec3::zeros(); self.num_vertices()];
        for (k, &v) in self.constrained.iter().enumerate() {
            out[v] = dirichlet[k];
        }
        for (k, &v) in self.unconstrained.iter().enumerate() {
            out[v] = inner[k];
        }
        Ok(out)
    }
}

/// Free function form of [`VolumetricLaplacian::solve_poisson`].
pub fn solve_poisson(
    laplacian: &VolumetricLaplacian,
    dirichlet: &[Vec3],
) -> Result<Vec<Vec3>, GeometryError> {
    laplacian.solve_poisson(dirichlet)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProxyShape {
    Sphere {
        center: Vec3,
        radius: f64,
    },
    /// `φ(x) = n·x − offset` with unit `normal`.
    HalfSpace {
        normal: Vec3,
        offset: f64,
    },
}

/// Static analytic collision body with a quadratic penalty of stiffness `stiffness`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollisionProxy {
    pub shape: ProxyShape,
    pub stiffness: f64,
}

impl CollisionProxy {
    pub fn sphere(center: Vec3, radius: f64, stiffness: f64) -> Self {
        Self {
            shape: ProxyShape::Sphere { center, radius },
            stiffness,
        }
    }

    pub fn half_space(normal: Vec3, offset: f64, stiffness: f64) -> Self {
        Self {
            shape: ProxyShape::HalfSpace {
                normal: normal.normalize(),
                offset,
            },
            stiffness,
        }
    }

    /// `(φ(x), ∇φ(x))`. At the exact center of a sphere the gradient is `+z`.
    pub fn signed_distance(&self, x: &Vec3) -> (f64, Vec3) {
        match self.shape {
            ProxyShape::HalfSpace { normal, offset } => (normal.dot(x) - offset, normal),
            ProxyShape::Sphere { center, radius } => {
                let d = x - center;
                let len = d.norm();
                if len == 0.0 {
                    (-radius, Vec3::z())
                } else {
                    (len - radius, d / len)
                }
            }
        }
    }

    /// `∇²φ(x)`; zero for half-spaces and at a sphere's center.
    pub fn distance_hessian(&self, x: &Vec3) -> Matrix3<f64> {
        match self.shape {
            ProxyShape::HalfSpace { .. } => Matrix3::zeros(),
            ProxyShape::Sphere { center, .. } => {
                let d = x - center;
                let len = d.norm();
                if len == 0.0 {
                    Matrix3::zeros()
                } else {
                    let n = d / len;
                    (Matrix3::identity() - n * n.transpose()) / len
                }
            }
        }
    }

    /// Penalty force `−k·min(φ,0)·∇φ`.
    pub fn force(&self, x: &Vec3) -> Vec3 {
        let (phi, grad) = self.signed_distance(x);
        if phi < 0.0 {
            grad * (-self.stiffness * phi)
        } else {
            Vec3::zeros()
        }
    }

    /// `∂force/∂x`. With `definite` the curvature term is dropped so that the
    /// negated block stays positive semi-definite.
    pub fn force_jacobian(&self, x: &Vec3, definite: bool) -> Matrix3<f64> {
        let (phi, grad) = self.signed_distance(x);
        if phi >= 0.0 {
            return Matrix3::zeros();
        }
        let mut k = grad * grad.transpose();
        if !definite {
            k += self.distance_hessian(x) * phi;
        }
        -k * self.stiffness
    }

    pub fn energy(&self, x: &Vec3) -> f64 {
        let (phi, _) = self.signed_distance(x);
        if phi < 0.0 {
            0.5 * self.stiffness * phi * phi
        } else {
            0.0
        }
    }
}

/// Free function form of [`CollisionProxy::signed_distance`].
pub fn signed_distance(proxy: &CollisionProxy, x: &Vec3) -> (f64, Vec3) {
    proxy.signed_distance(x)
}
