//! Pinhole camera, spherical-harmonics Lambertian shading, image pyramids,
//! and the vertex-sampled shading and roto-curve residuals.
//!
//! Pixel `(i, j)` has its center at `(u, v) = (i, j)`. Level `ℓ` of a pyramid
//! is addressed with `(u + 0.5) / 2^ℓ − 0.5`.

use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use nalgebra::{DMatrix, Matrix2x3, Matrix3};
use thiserror::Error;

use crate::geometry::{vertex_normal_jacobians, vertex_normals, Vec3};

pub const SH_COEFFS: usize = 9;
/// Relative depth slack when testing a vertex against the z-buffer.
pub const DEPTH_TOLERANCE: f64 = 0.005;
pub const DEFAULT_LEVEL_WEIGHTS: [f64; 3] = [1.0, 0.5, 0.25];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ImagingError {
    #[error("point {index} is behind the camera (depth {depth:e})")]
    BehindCamera { index: usize, depth: f64 },
    #[error("no surface vertex is visible")]
    NothingVisible,
    #[error("image data has {got} pixels, expected {expected}")]
    ImageSize { expected: usize, got: usize },
    #[error("invalid camera intrinsics")]
    Intrinsics,
    #[error("{got} values for {expected} surface vertices")]
    VertexCount { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World → camera rotation.
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vec3,
        width: usize,
        height: usize,
    ) -> Result<Self, ImagingError> {
        if !(fx > 0.0 && fy > 0.0 && width > 1 && height > 1) {
            return Err(ImagingError::Intrinsics);
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
        })
    }

    /// Camera looking down world `−z` from `center`, image axes along world
    /// `+x` and `−y`.
    pub fn looking_down(center: Vec3, focal: f64, width: usize, height: usize) -> Self {
        let rotation = Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0);
        Self {
            fx: focal,
            fy: focal,
            cx: 0.5 * (width as f64 - 1.0),
            cy: 0.5 * (height as f64 - 1.0),
            rotation,
            translation: -(rotation * center),
            width,
            height,
        }
    }

    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// `(u, v, depth)`.
    pub fn project(&self, x: &Vec3) -> Result<(f64, f64, f64), ImagingError> {
        let p = self.rotation * x + self.translation;
        if p.z <= 1e-9 {
            return Err(ImagingError::BehindCamera {
                index: 0,
                depth: p.z,
            });
        }
        Ok((
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
            p.z,
        ))
    }

    /// `∂(u, v)/∂x`.
    pub fn project_jacobian(&self, x: &Vec3) -> Matrix2x3<f64> {
        let p = self.rotation * x + self.translation;
        let iz = 1.0 / p.z;
        let d = Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * p.x * iz * iz,
            0.0,
            self.fy * iz,
            -self.fy * p.y * iz * iz,
        );
        d * self.rotation
    }
}

pub fn project(cam: &Camera, x: &Vec3) -> Result<(f64, f64, f64), ImagingError> {
    cam.project(x)
}

/// Real spherical-harmonics basis (bands 0–2) at a unit normal.
pub fn sh_basis(n: &Vec3) -> [f64; SH_COEFFS] {
    let (x, y, z) = (n.x, n.y, n.z);
    [
        0.282095,
        0.488603 * y,
        0.488603 * z,
        0.488603 * x,
        1.092548 * x * y,
        1.092548 * y * z,
        0.315392 * (3.0 * z * z - 1.0),
        1.092548 * x * z,
        0.546274 * (x * x - y * y),
    ]
}

/// Gradients of [`sh_basis`] with respect to the normal.
pub fn sh_basis_gradient(n: &Vec3) -> [Vec3; SH_COEFFS] {
    let (x, y, z) = (n.x, n.y, n.z);
    [
        Vec3::zeros(),
        Vec3::new(0.0, 0.488603, 0.0),
        Vec3::new(0.0, 0.0, 0.488603),
        Vec3::new(0.488603, 0.0, 0.0),
        Vec3::new(1.092548 * y, 1.092548 * x, 0.0),
        Vec3::new(0.0, 1.092548 * z, 1.092548 * y),
        Vec3::new(0.0, 0.0, 0.315392 * 6.0 * z),
        Vec3::new(1.092548 * z, 0.0, 1.092548 * x),
        Vec3::new(0.546274 * 2.0 * x, -0.546274 * 2.0 * y, 0.0),
    ]
}

pub fn sh_irradiance(gamma: &[f64; SH_COEFFS], n: &Vec3) -> f64 {
    sh_basis(n).iter().zip(gamma).map(|(y, g)| y * g).sum()
}

pub fn sh_irradiance_gradient(gamma: &[f64; SH_COEFFS], n: &Vec3) -> Vec3 {
    sh_basis_gradient(n)
        .iter()
        .zip(gamma)
        .fold(Vec3::zeros(), |acc, (d, g)| acc + d * *g)
}

/// RGB float image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<Vec3>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<Vec3>) -> Result<Self, ImagingError> {
        if data.len() != width * height {
            return Err(ImagingError::ImageSize {
                expected: width * height,
                got: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: Vec3) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Vec3 {
        self.data[j * self.width + i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: Vec3) {
        self.data[j * self.width + i] = v;
    }

    /// Bilinear sample and its `u`/`v` derivatives, clamped at the border.
    pub fn sample(&self, u: f64, v: f64) -> (Vec3, Vec3, Vec3) {
        let axis = |x: f64, n: usize| -> (usize, f64, bool) {
            let max = (n - 1) as f64;
            if x <= 0.0 {
                (0, 0.0, false)
            } else if x >= max {
                (n - 2, 1.0, false)
            } else {
                let i = (x.floor() as usize).min(n - 2);
                (i, x - i as f64, true)
            }
        };
        let (i, fu, inside_u) = axis(u, self.width);
        let (j, fv, inside_v) = axis(v, self.height);
        let p00 = self.get(i, j);
        let p10 = self.get(i + 1, j);
        let p01 = self.get(i, j + 1);
        let p11 = self.get(i + 1, j + 1);
        let value = p00 * ((1.0 - fu) * (1.0 - fv))
            + p10 * (fu * (1.0 - fv))
            + p01 * ((1.0 - fu) * fv)
            + p11 * (fu * fv);
        let du = if inside_u {
            (p10 - p00) * (1.0 - fv) + (p11 - p01) * fv
        } else {
            Vec3::zeros()
        };
        let dv = if inside_v {
            (p01 - p00) * (1.0 - fu) + (p11 - p10) * fu
        } else {
            Vec3::zeros()
        };
        (value, du, dv)
    }

    fn blurred(&self) -> Image {
        const K: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
        let (w, h) = (self.width as isize, self.height as isize);
        let clamp = |x: isize, n: isize| x.clamp(0, n - 1) as usize;
        let mut tmp = Image::filled(self.width, self.height, Vec3::zeros());
        for j in 0..h {
            for i in 0..w {
                let mut acc = Vec3::zeros();
                for (k, wk) in K.iter().enumerate() {
                    acc += self.get(clamp(i + k as isize - 2, w), j as usize) * *wk;
                }
                tmp.set(i as usize, j as usize, acc);
            }
        }
        let mut out = Image::filled(self.width, self.height, Vec3::zeros());
        for j in 0..h {
            for i in 0..w {
                let mut acc = Vec3::zeros();
                for (k, wk) in K.iter().enumerate() {
                    acc += tmp.get(i as usize, clamp(j + k as isize - 2, h)) * *wk;
                }
                out.set(i as usize, j as usize, acc);
            }
        }
        out
    }

    /// Blur, then average 2×2 blocks so that level pixel `i` sits at `2i + 0.5`.
    pub fn downsample(&self) -> Image {
        let b = self.blurred();
        let (w, h) = ((self.width / 2).max(1), (self.height / 2).max(1));
        let mut out = Image::filled(w, h, Vec3::zeros());
        for j in 0..h {
            for i in 0..w {
                let i1 = (2 * i + 1).min(self.width - 1);
                let j1 = (2 * j + 1).min(self.height - 1);
                let v = (b.get(2 * i, 2 * j) + b.get(i1, 2 * j) + b.get(2 * i, j1) + b.get(i1, j1))
                    * 0.25;
                out.set(i, j, v);
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(Vec3) -> Vec3) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&p| f(p)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePyramid {
    pub levels: Vec<Image>,
}

impl ImagePyramid {
    pub const DEFAULT_LEVELS: usize = 3;

    pub fn new(image: Image, levels: usize) -> Self {
        let mut out = vec![image];
        while out.len() < levels.max(1) {
            let next = out.last().unwrap().downsample();
            out.push(next);
        }
        Self { levels: out }
    }

    pub fn level_coordinates(level: usize, u: f64, v: f64) -> (f64, f64) {
        let s = 1.0 / (1u64 << level) as f64;
        ((u + 0.5) * s - 0.5, (v + 0.5) * s - 0.5)
    }
}

/// Front-facing vertices that win a 1-pixel z-buffer splat.
pub fn visibility(cam: &Camera, positions: &[Vec3], normals: &[Vec3]) -> Vec<bool> {
    let center = cam.center();
    let projected: Vec<Option<(usize, f64)>> = positions
        .iter()
        .zip(normals)
        .map(|(x, n)| {
            if n.dot(&(center - x)) <= 0.0 {
                return None;
            }
            let (u, v, d) = cam.project(x).ok()?;
            let (i, j) = (u.round(), v.round());
            if i < 0.0 || j < 0.0 || i >= cam.width as f64 || j >= cam.height as f64 {
                return None;
            }
            Some((j as usize * cam.width + i as usize, d))
        })
        .collect();
    let mut zbuf: alloc::collections::BTreeMap<usize, f64> = alloc::collections::BTreeMap::new();
    for &(pix, d) in projected.iter().flatten() {
        let e = zbuf.entry(pix).or_insert(f64::INFINITY);
        *e = e.min(d);
    }
    projected
        .iter()
        .map(|p| match p {
            Some((pix, d)) => *d <= zbuf[pix] * (1.0 + DEPTH_TOLERANCE),
            None => false,
        })
        .collect()
}

/// Shading residual and, optionally, its Jacobians. Rows are ordered level,
/// vertex, channel; hidden vertices produce zero rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadingLinearization {
    pub residual: Vec<f64>,
    /// `∂r/∂x` over surface positions (`rows × 3V`).
    pub d_positions: DMatrix<f64>,
    /// `∂r/∂γ` (`rows × 9`).
    pub d_gamma: DMatrix<f64>,
    /// `∂r/∂c` over per-vertex RGB albedo (`rows × 3V`).
    pub d_albedo: DMatrix<f64>,
}

/// Inputs of the shading residual that stay fixed within one evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ShadingSetup<'a> {
    pub camera: &'a Camera,
    pub triangles: &'a [[usize; 3]],
    pub plate: &'a ImagePyramid,
    pub level_weights: &'a [f64],
}

impl ShadingSetup<'_> {
    pub fn num_rows(&self, num_vertices: usize) -> usize {
        3 * num_vertices * self.level_weights.len().min(self.plate.levels.len())
    }

    /// Plate minus model shading at every visible vertex on every level.
    pub fn evaluate(
        &self,
        positions: &[Vec3],
        gamma: &[f64; SH_COEFFS],
        albedo: &[Vec3],
        visible: &[bool],
        with_jacobian: bool,
    ) -> Result<ShadingLinearization, ImagingError> {
        let nv = positions.len();
        if albedo.len() != nv || visible.len() != nv {
            return Err(ImagingError::VertexCount {
                expected: nv,
                got: albedo.len().min(visible.len()),
            });
        }
        if !visible.iter().any(|&v| v) {
            return Err(ImagingError::NothingVisible);
        }
        let normals = vertex_normals(positions, self.triangles);
        let dn = if with_jacobian {
            vertex_normal_jacobians(positions, self.triangles)
        } else {
            Vec::new()
        };
        let levels = self.level_weights.len().min(self.plate.levels.len());
        let rows = 3 * nv * levels;
        let (jr, jg, ja) = if with_jacobian {
            (rows, rows, rows)
        } else {
            (0, 0, 0)
        };
        let mut out = ShadingLinearization {
            residual: vec![0.0; rows],
            d_positions: DMatrix::zeros(jr, 3 * nv),
            d_gamma: DMatrix::zeros(jg, SH_COEFFS),
            d_albedo: DMatrix::zeros(ja, 3 * nv),
        };
        for i in 0..nv {
            if !visible[i] {
                continue;
            }
            let (u, v, _) =
                self.camera
                    .project(&positions[i])
                    .map_err(|_| ImagingError::BehindCamera {
                        index: i,
                        depth: (self.camera.rotation * positions[i] + self.camera.translation).z,
                    })?;
            let basis = sh_basis(&normals[i]);
            let e: f64 = basis.iter().zip(gamma).map(|(y, g)| y * g).sum();
            let de_dn = sh_irradiance_gradient(gamma, &normals[i]);
            let dp = if with_jacobian {
                self.camera.project_jacobian(&positions[i])
            } else {
                Matrix2x3::zeros()
            };
            for (l, &w) in self.level_weights.iter().take(levels).enumerate() {
                let (ul, vl) = ImagePyramid::level_coordinates(l, u, v);
                let (value, du, dv) = self.plate.levels[l].sample(ul, vl);
                let s = 1.0 / (1u64 << l) as f64;
                for c in 0..3 {
                    let row = (l * nv + i) * 3 + c;
                    out.residual[row] = w * (value[c] - albedo[i][c] * e);
                    if !with_jacobian {
                        continue;
                    }
                    let grad_uv = nalgebra::RowVector2::new(du[c] * s, dv[c] * s) * dp;
                    for a in 0..3 {
                        out.d_positions[(row, 3 * i + a)] += w * grad_uv[a];
                    }
                    let shade = de_dn * (-w * albedo[i][c]);
                    for (j, m) in &dn[i] {
                        let g = m.transpose() * shade;
                        for a in 0..3 {
                            out.d_positions[(row, 3 * j + a)] += g[a];
                        }
                    }
                    for k in 0..SH_COEFFS {
                        out.d_gamma[(row, k)] = -w * albedo[i][c] * basis[k];
                    }
                    out.d_albedo[(row, 3 * i + c)] = -w * e;
                }
            }
        }
        Ok(out)
    }
}

/// Residual-only form of [`ShadingSetup::evaluate`].
#[allow(clippy::too_many_arguments)]
pub fn vertex_shading_residual(
    positions: &[Vec3],
    triangles: &[[usize; 3]],
    gamma: &[f64; SH_COEFFS],
    albedo: &[Vec3],
    cam: &Camera,
    plate: &ImagePyramid,
    level_weights: &[f64],
) -> Result<Vec<f64>, ImagingError> {
    let normals = vertex_normals(positions, triangles);
    let visible = visibility(cam, positions, &normals);
    let setup = ShadingSetup {
        camera: cam,
        triangles,
        plate,
        level_weights,
    };
    Ok(setup
        .evaluate(positions, gamma, albedo, &visible, false)?
        .residual)
}

/// One surface point (barycentric on a triangle) and its target pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotoPoint {
    pub triangle: [usize; 3],
    pub barycentric: [f64; 3],
    pub target: [f64; 2],
}

impl RotoPoint {
    pub fn position(&self, positions: &[Vec3]) -> Vec3 {
        (0..3).fold(Vec3::zeros(), |acc, k| {
            acc + positions[self.triangle[k]] * self.barycentric[k]
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RotoConstraint {
    pub points: Vec<RotoPoint>,
}

impl RotoConstraint {
    /// Projected position minus target, two rows per point.
    pub fn residual(&self, positions: &[Vec3], cam: &Camera) -> Result<Vec<f64>, ImagingError> {
        let mut r = Vec::with_capacity(2 * self.points.len());
        for (k, p) in self.points.iter().enumerate() {
            let (u, v, _) = cam.project(&p.position(positions)).map_err(|e| match e {
                ImagingError::BehindCamera { depth, .. } => {
                    ImagingError::BehindCamera { index: k, depth }
                }
                other => other,
            })?;
            r.push(u - p.target[0]);
            r.push(v - p.target[1]);
        }
        Ok(r)
    }

    /// `∂r/∂x` over surface positions (`2P × 3V`).
    pub fn jacobian(&self, positions: &[Vec3], cam: &Camera) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(2 * self.points.len(), 3 * positions.len());
        for (k, p) in self.points.iter().enumerate() {
            let d = cam.project_jacobian(&p.position(positions));
            for t in 0..3 {
                let v = p.triangle[t];
                for r in 0..2 {
                    for a in 0..3 {
                        j[(2 * k + r, 3 * v + a)] += d[(r, a)] * p.barycentric[t];
                    }
                }
            }
        }
        j
    }
}

pub fn roto_residual(
    positions: &[Vec3],
    constraints: &RotoConstraint,
    cam: &Camera,
) -> Result<Vec<f64>, ImagingError> {
    constraints.residual(positions, cam)
}

/// Per-vertex model shading `c_i · E(n_i)`.
pub fn vertex_shading(
    positions: &[Vec3],
    triangles: &[[usize; 3]],
    gamma: &[f64; SH_COEFFS],
    albedo: &[Vec3],
) -> Vec<Vec3> {
    vertex_normals(positions, triangles)
        .iter()
        .zip(albedo)
        .map(|(n, c)| c * sh_irradiance(gamma, n))
        .collect()
}

/// Renders the shaded surface with Gouraud interpolation and a z-buffer, then
/// writes each visible vertex's exact shade into the four pixels its
/// bilinear sample reads, so level-0 samples at the vertices are exact.
pub fn synthesize_plate(
    cam: &Camera,
    positions: &[Vec3],
    triangles: &[[usize; 3]],
    gamma: &[f64; SH_COEFFS],
    albedo: &[Vec3],
    background: Vec3,
) -> Result<Image, ImagingError> {
    let shade = vertex_shading(positions, triangles, gamma, albedo);
    let proj = positions
        .iter()
        .enumerate()
        .map(|(i, x)| {
            cam.project(x).map_err(|_| ImagingError::BehindCamera {
                index: i,
                depth: 0.0,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut img = Image::filled(cam.width, cam.height, background);
    let mut depth = vec![f64::INFINITY; cam.width * cam.height];
    for t in triangles {
        let p = t.map(|v| proj[v]);
        let area = (p[1].0 - p[0].0) * (p[2].1 - p[0].1) - (p[2].0 - p[0].0) * (p[1].1 - p[0].1);
        if area.abs() < 1e-12 {
            continue;
        }
        let umin = p
            .iter()
            .map(|q| q.0)
            .fold(f64::INFINITY, f64::min)
            .floor()
            .max(0.0) as usize;
        let vmin = p
            .iter()
            .map(|q| q.1)
            .fold(f64::INFINITY, f64::min)
            .floor()
            .max(0.0) as usize;
        let umax = (p
            .iter()
            .map(|q| q.0)
            .fold(f64::NEG_INFINITY, f64::max)
            .ceil() as usize)
            .min(cam.width - 1);
        let vmax = (p
            .iter()
            .map(|q| q.1)
            .fold(f64::NEG_INFINITY, f64::max)
            .ceil() as usize)
            .min(cam.height - 1);
        for j in vmin..=vmax {
            for i in umin..=umax {
                let (x, y) = (i as f64, j as f64);
                let w1 =
                    ((x - p[0].0) * (p[2].1 - p[0].1) - (p[2].0 - p[0].0) * (y - p[0].1)) / area;
                let w2 =
                    ((p[1].0 - p[0].0) * (y - p[0].1) - (x - p[0].0) * (p[1].1 - p[0].1)) / area;
                let w0 = 1.0 - w1 - w2;
                if w0 < -1e-9 || w1 < -1e-9 || w2 < -1e-9 {
                    continue;
                }
                let d = w0 * p[0].2 + w1 * p[1].2 + w2 * p[2].2;
                let k = j * cam.width + i;
                if d < depth[k] {
                    depth[k] = d;
                    img.data[k] = shade[t[0]] * w0 + shade[t[1]] * w1 + shade[t[2]] * w2;
                }
            }
        }
    }
    let normals = vertex_normals(positions, triangles);
    let visible = visibility(cam, positions, &normals);
    for (i, &(u, v, _)) in proj.iter().enumerate() {
        if !visible[i] || u < 0.0 || v < 0.0 {
            continue;
        }
        let (i0, j0) = (u.floor() as usize, v.floor() as usize);
        if i0 + 1 >= cam.width || j0 + 1 >= cam.height {
            continue;
        }
        for (di, dj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            img.set(i0 + di, j0 + dj, shade[i]);
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotation::euler_xyz;
    use proptest::prelude::*;

    fn cam() -> Camera {
        Camera::looking_down(Vec3::new(0.02, 0.015, 0.25), 1200.0, 320, 240)
    }

    /// A gently curved 6×5 sheet below the camera.
    fn sheet() -> (Vec<Vec3>, Vec<[usize; 3]>) {
        let (nx, ny) = (6, 5);
        let mut p = Vec::new();
        for j in 0..ny {
            for i in 0..nx {
                let (x, y) = (i as f64 * 0.008, j as f64 * 0.008);
                p.push(Vec3::new(
                    x,
                    y,
                    0.02 + 0.004 * ((x * 80.0).sin() * (y * 60.0).cos()),
                ));
            }
        }
        let mut t = Vec::new();
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let a = j * nx + i;
                t.push([a, a + 1, a + nx + 1]);
                t.push([a, a + nx + 1, a + nx]);
            }
        }
        (p, t)
    }

    fn gamma() -> [f64; 9] {
        [1.8, 0.1, 0.6, -0.2, 0.05, 0.1, -0.15, 0.08, 0.03]
    }

    fn albedo(n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|i| Vec3::new(0.6 + 0.01 * i as f64, 0.5, 0.4 - 0.005 * i as f64))
            .collect()
    }

    #[test]
    fn projection_examples() {
        let c = Camera::new(
            800.0,
            700.0,
            320.0,
            240.0,
            Matrix3::identity(),
            Vec3::zeros(),
            640,
            480,
        )
        .unwrap();
        assert_eq!(
            c.project(&Vec3::new(0.0, 0.0, 2.0)).unwrap(),
            (320.0, 240.0, 2.0)
        );
        let (u, v, d) = c.project(&Vec3::new(2.0 / 800.0, 0.0, 2.0)).unwrap();
        assert!((u - 321.0).abs() < 1e-12 && v == 240.0 && d == 2.0);
        assert!(c.project(&Vec3::new(0.0, 0.0, -1.0)).is_err());
    }

    #[test]
    fn projection_jacobian_matches_differences() {
        let c = cam();
        let x = Vec3::new(0.01, 0.03, 0.02);
        let j = c.project_jacobian(&x);
        let h = 1e-7;
        for a in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[a] += h;
            xm[a] -= h;
            let (up, vp, _) = c.project(&xp).unwrap();
            let (um, vm, _) = c.project(&xm).unwrap();
            assert!(((up - um) / (2.0 * h) - j[(0, a)]).abs() < 1e-4);
            assert!(((vp - vm) / (2.0 * h) - j[(1, a)]).abs() < 1e-4);
        }
    }

    #[test]
    fn band_zero_is_isotropic() {
        let mut g = [0.0; 9];
        g[0] = 1.0;
        for n in [Vec3::x(), Vec3::new(0.0, 0.6, 0.8), -Vec3::z()] {
            assert_eq!(sh_irradiance(&g, &n), 0.282095);
        }
    }

    #[test]
    fn z_linear_band_is_odd() {
        let mut g = [0.0; 9];
        g[2] = 0.7;
        let n = Vec3::new(0.3, -0.4, 0.866_025_403_784_438_6).normalize();
        let flipped = Vec3::new(n.x, n.y, -n.z);
        assert!((sh_irradiance(&g, &n) + sh_irradiance(&g, &flipped)).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn irradiance_matches_basis_table(
            g in proptest::array::uniform9(-2.0f64..2.0),
            d in proptest::array::uniform3(-1.0f64..1.0),
        ) {
            let n = Vec3::new(d[0], d[1], d[2] + 1.5).normalize();
            let (x, y, z) = (n.x, n.y, n.z);
            let table = [
                0.282095, 0.488603 * y, 0.488603 * z, 0.488603 * x, 1.092548 * x * y,
                1.092548 * y * z, 0.315392 * (3.0 * z * z - 1.0), 1.092548 * x * z,
                0.546274 * (x * x - y * y),
            ];
            let direct: f64 = table.iter().zip(&g).map(|(a, b)| a * b).sum();
            prop_assert!((sh_irradiance(&g, &n) - direct).abs() < 1e-12);
        }

        #[test]
        fn constant_image_pyramid_is_constant(
            w in 4usize..40, h in 4usize..40, c in proptest::array::uniform3(-5.0f64..5.0),
        ) {
            let value = Vec3::new(c[0], c[1], c[2]);
            let pyr = ImagePyramid::new(Image::filled(w, h, value), 3);
            for level in &pyr.levels {
                for p in &level.data {
                    prop_assert!((p - value).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pyramid_sizes_halve() {
        let pyr = ImagePyramid::new(Image::filled(720, 540, Vec3::zeros()), 3);
        let sizes: Vec<(usize, usize)> = pyr.levels.iter().map(|l| (l.width, l.height)).collect();
        assert_eq!(sizes, [(720, 540), (360, 270), (180, 135)]);
    }

    #[test]
    fn self_synthesized_plate_has_zero_level0_residual() {
        let (p, t) = sheet();
        let c = cam();
        let a = albedo(p.len());
        let plate = synthesize_plate(&c, &p, &t, &gamma(), &a, Vec3::zeros()).unwrap();
        let pyr = ImagePyramid::new(plate, 3);
        let r = vertex_shading_residual(&p, &t, &gamma(), &a, &c, &pyr, &[1.0]).unwrap();
        let norm: f64 = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm < 1e-6, "{norm:e}");
    }

    #[test]
    fn constant_plate_with_matching_albedo_has_zero_residual() {
        let (p, t) = sheet();
        let c = cam();
        let g = gamma();
        let n = vertex_normals(&p, &t);
        let target = 0.4;
        let a: Vec<Vec3> = n
            .iter()
            .map(|n| Vec3::repeat(target / sh_irradiance(&g, n)))
            .collect();
        let pyr = ImagePyramid::new(Image::filled(c.width, c.height, Vec3::repeat(target)), 3);
        let r = vertex_shading_residual(&p, &t, &g, &a, &c, &pyr, &DEFAULT_LEVEL_WEIGHTS).unwrap();
        assert!(r.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn plate_offset_shifts_level0_residual() {
        let (p, t) = sheet();
        let c = cam();
        let a = albedo(p.len());
        let plate = synthesize_plate(&c, &p, &t, &gamma(), &a, Vec3::zeros()).unwrap();
        let shifted = plate.map(|v| v + Vec3::repeat(100.0));
        let r0 = vertex_shading_residual(
            &p,
            &t,
            &gamma(),
            &a,
            &c,
            &ImagePyramid::new(plate, 1),
            &[1.0],
        )
        .unwrap();
        let r1 = vertex_shading_residual(
            &p,
            &t,
            &gamma(),
            &a,
            &c,
            &ImagePyramid::new(shifted, 1),
            &[1.0],
        )
        .unwrap();
        for (x, y) in r0.iter().zip(&r1) {
            assert!((y - x - 100.0).abs() < 1e-9);
        }
    }

    #[test]
    fn shading_jacobians_match_differences() {
        let (p, t) = sheet();
        let c = cam();
        let a = albedo(p.len());
        let g = gamma();
        // Plate with a different lighting so the residual is not zero.
        let mut g2 = g;
        g2[3] += 0.4;
        let mut plate = synthesize_plate(&c, &p, &t, &g2, &a, Vec3::repeat(0.2)).unwrap();
        for j in 0..plate.height {
            for i in 0..plate.width {
                let (x, y) = (i as f64, j as f64);
                let bump =
                    Vec3::new((0.21 * x).sin(), (0.17 * y).cos(), (0.05 * (x + y)).sin()) * 0.1;
                plate.set(i, j, plate.get(i, j) + bump);
            }
        }
        let pyr = ImagePyramid::new(plate, 3);
        let setup = ShadingSetup {
            camera: &c,
            triangles: &t,
            plate: &pyr,
            level_weights: &DEFAULT_LEVEL_WEIGHTS,
        };
        // Nudge off the exact vertex footprints so samples sit inside cells.
        let x: Vec<Vec3> = p
            .iter()
            .map(|v| v + Vec3::new(1.3e-6, -0.7e-6, 0.0))
            .collect();
        let vis = visibility(&c, &x, &vertex_normals(&x, &t));
        let lin = setup.evaluate(&x, &g, &a, &vis, true).unwrap();
        let eval = |x: &[Vec3], g: &[f64; 9], a: &[Vec3]| {
            setup.evaluate(x, g, a, &vis, false).unwrap().residual
        };
        // 0.05 px in projected space.
        let h = 0.05 * 0.23 / 1200.0;
        let cells = |x: &Vec3| -> Vec<(i64, i64)> {
            let (u, v, _) = c.project(x).unwrap();
            (0..3)
                .map(|l| {
                    let (ul, vl) = ImagePyramid::level_coordinates(l, u, v);
                    (ul.floor() as i64, vl.floor() as i64)
                })
                .collect()
        };
        let mut worst = 0.0f64;
        let mut probes = 0;
        for v in 0..x.len() {
            for d in 0..3 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[v][d] += h;
                xm[v][d] -= h;
                if cells(&xp[v]) != cells(&x[v]) || cells(&xm[v]) != cells(&x[v]) {
                    continue;
                }
                probes += 1;
                let (rp, rm) = (eval(&xp, &g, &a), eval(&xm, &g, &a));
                let col = lin.d_positions.column(3 * v + d);
                let fd: Vec<f64> = rp
                    .iter()
                    .zip(&rm)
                    .map(|(p, m)| (p - m) / (2.0 * h))
                    .collect();
                let err: f64 = fd
                    .iter()
                    .zip(col.iter())
                    .map(|(f, c)| (f - c).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let norm: f64 = col.iter().map(|c| c * c).sum::<f64>().sqrt();
                worst = worst.max(err / norm.max(1e-12));
            }
        }
        assert!(probes > x.len(), "only {probes} probes");
        assert!(worst < 1e-5, "positions {worst:e}");
        for k in 0..9 {
            let mut gp = g;
            gp[k] += 1e-3;
            let rp = eval(&x, &gp, &a);
            let r0 = eval(&x, &g, &a);
            for (row, (p, m)) in rp.iter().zip(&r0).enumerate() {
                assert!(((p - m) / 1e-3 - lin.d_gamma[(row, k)]).abs() < 1e-9);
            }
        }
        let mut ap = a.clone();
        ap[4][1] += 1e-3;
        let (rp, r0) = (eval(&x, &g, &ap), eval(&x, &g, &a));
        for (row, (p, m)) in rp.iter().zip(&r0).enumerate() {
            assert!(((p - m) / 1e-3 - lin.d_albedo[(row, 13)]).abs() < 1e-9);
        }
    }

    #[test]
    fn hidden_and_back_facing_vertices_are_invisible() {
        let c = cam();
        let pts = [
            Vec3::new(0.02, 0.015, 0.02),
            Vec3::new(0.02, 0.015, 0.01),
            Vec3::new(0.01, 0.01, 0.02),
        ];
        let normals = [Vec3::z(), Vec3::z(), -Vec3::z()];
        assert_eq!(visibility(&c, &pts, &normals), [true, false, false]);
    }

    #[test]
    fn roto_examples() {
        let (p, _) = sheet();
        let c = cam();
        let x0 = c.project(&p[7]).unwrap();
        let mut con = RotoConstraint {
            points: vec![RotoPoint {
                triangle: [7, 8, 13],
                barycentric: [1.0, 0.0, 0.0],
                target: [x0.0, x0.1],
            }],
        };
        assert!(roto_residual(&p, &con, &c)
            .unwrap()
            .iter()
            .all(|r| r.abs() < 1e-12));
        con.points[0].target = [x0.0 - 3.0, x0.1 - 4.0];
        let r = roto_residual(&p, &con, &c).unwrap();
        assert!(((r[0] * r[0] + r[1] * r[1]).sqrt() - 5.0).abs() < 1e-9);
        let mut moved = p.clone();
        moved[20] += Vec3::new(0.01, 0.0, 0.0);
        assert_eq!(roto_residual(&moved, &con, &c).unwrap(), r);
    }

    #[test]
    fn roto_jacobian_matches_differences() {
        let (p, _) = sheet();
        let c = Camera {
            rotation: euler_xyz(&Vec3::new(3.0, 0.1, -0.2)),
            ..cam()
        };
        let c = Camera {
            translation: -(c.rotation * Vec3::new(0.02, 0.015, 0.25)),
            ..c
        };
        let con = RotoConstraint {
            points: vec![
                RotoPoint {
                    triangle: [7, 8, 13],
                    barycentric: [0.2, 0.3, 0.5],
                    target: [10.0, 20.0],
                },
                RotoPoint {
                    triangle: [1, 2, 8],
                    barycentric: [0.6, 0.1, 0.3],
                    target: [50.0, 40.0],
                },
            ],
        };
        let j = con.jacobian(&p, &c);
        let h = 1e-7;
        for v in [1, 2, 7, 8, 13] {
            for a in 0..3 {
                let mut xp = p.clone();
                let mut xm = p.clone();
                xp[v][a] += h;
                xm[v][a] -= h;
                let (rp, rm) = (
                    con.residual(&xp, &c).unwrap(),
                    con.residual(&xm, &c).unwrap(),
                );
                for r in 0..4 {
                    let fd = (rp[r] - rm[r]) / (2.0 * h);
                    assert!((fd - j[(r, 3 * v + a)]).abs() < 1e-5 * (1.0 + fd.abs()));
                }
            }
        }
    }
}
