//! On-disk schemas: asset JSON, OBJ surfaces, PNG plates.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use facecap_core::anatomy::Muscle;
use facecap_core::assets::{Asset, AssetSpec, SyntheticPlates};
use facecap_core::geometry::{CollisionProxy, ProxyShape, SurfaceMesh, TetMesh, Vec3};
use facecap_core::imaging::{Camera, Image, RotoConstraint, RotoPoint, SH_COEFFS};
use facecap_core::material::MaterialParams;
use facecap_core::rig::{Blendshapes, JawJoint, Rig, SkinWeights};
use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const ASSET_FILE: &str = "asset.json";
pub const SURFACE_FILE: &str = "neutral.obj";
pub const NEUTRAL_PLATE_FILE: &str = "plate_neutral.png";
pub const EXPRESSION_PLATE_FILE: &str = "plate_expression.png";
pub const ASSET_FORMAT: &str = "facecap-asset/1";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("{path}:{line}: {message}")]
    Obj {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: unsupported format `{found}` (expected `{expected}`)")]
    Version {
        path: PathBuf,
        found: String,
        expected: &'static str,
    },
    #[error("invalid asset: {0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub type V3 = [f64; 3];

pub fn v3(v: &Vec3) -> V3 {
    [v.x, v.y, v.z]
}

pub fn vec3(a: &V3) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

pub fn to_v3s(v: &[Vec3]) -> Vec<V3> {
    v.iter().map(v3).collect()
}

pub fn to_vec3s(v: &[V3]) -> Vec<Vec3> {
    v.iter().map(vec3).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecFile {
    pub resolution: [usize; 3],
    pub spacing: f64,
    pub num_muscles: usize,
    pub num_shapes: usize,
    pub jaw_pivot_offset: V3,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TetMeshFile {
    pub vertices: Vec<V3>,
    pub tets: Vec<[usize; 4]>,
    pub boundary: Vec<usize>,
    pub boundary_triangles: Vec<[usize; 3]>,
    pub inner_boundary: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigFile {
    pub shape_names: Vec<String>,
    pub neutral: Vec<V3>,
    pub deltas: Vec<Vec<V3>>,
    pub triangles: Vec<[usize; 3]>,
    pub skin_weights: Vec<f64>,
    pub jaw_pivot: V3,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialFile {
    pub mu10: f64,
    pub mu01: f64,
    pub kappa: f64,
    pub k_passive: f64,
    pub sigma_max: f64,
    pub clamp_sv: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MuscleFile {
    pub name: String,
    pub tets: Vec<usize>,
    pub fibers: Vec<V3>,
    pub stiffness: f64,
    pub curve: Vec<V3>,
    pub shortening: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "shape", rename_all = "snake_case")]
pub enum ProxyFile {
    Sphere {
        center: V3,
        radius: f64,
        stiffness: f64,
    },
    HalfSpace {
        normal: V3,
        offset: f64,
        stiffness: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnatomyFile {
    pub material: MaterialFile,
    pub muscles: Vec<MuscleFile>,
    pub proxies: Vec<ProxyFile>,
    pub constrained: Vec<usize>,
    pub surface_to_flesh: Vec<usize>,
    pub lip_region: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraFile {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major world → camera rotation.
    pub rotation: [[f64; 3]; 3],
    pub translation: V3,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RotoPointFile {
    pub triangle: [usize; 3],
    pub barycentric: [f64; 3],
    pub target: [f64; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlatesFile {
    pub gamma: [f64; SH_COEFFS],
    pub albedo: Vec<V3>,
    pub background: V3,
    pub neutral: String,
    pub expression: String,
    pub expression_controls: Vec<f64>,
    pub roto: Vec<RotoPointFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssetFile {
    pub format: String,
    pub spec: SpecFile,
    pub flesh: TetMeshFile,
    pub rig: RigFile,
    pub anatomy: AnatomyFile,
    pub camera: CameraFile,
    pub plates: PlatesFile,
}

impl From<&Camera> for CameraFile {
    fn from(c: &Camera) -> Self {
        let r = &c.rotation;
        Self {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            rotation: [0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]]),
            translation: v3(&c.translation),
            width: c.width,
            height: c.height,
        }
    }
}

impl CameraFile {
    pub fn to_camera(&self) -> Camera {
        let r = &self.rotation;
        Camera {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            rotation: Matrix3::new(
                r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
            ),
            translation: vec3(&self.translation),
            width: self.width,
            height: self.height,
        }
    }
}

pub fn roto_to_file(r: &RotoConstraint) -> Vec<RotoPointFile> {
    r.points
        .iter()
        .map(|p| RotoPointFile {
            triangle: p.triangle,
            barycentric: p.barycentric,
            target: p.target,
        })
        .collect()
}

pub fn roto_from_file(points: &[RotoPointFile]) -> RotoConstraint {
    RotoConstraint {
        points: points
            .iter()
            .map(|p| RotoPoint {
                triangle: p.triangle,
                barycentric: p.barycentric,
                target: p.target,
            })
            .collect(),
    }
}

impl AssetFile {
    pub fn from_asset(a: &Asset) -> Self {
        let s = &a.spec;
        let m = &a.material;
        Self {
            format: ASSET_FORMAT.to_string(),
            spec: SpecFile {
                resolution: s.resolution,
                spacing: s.spacing,
                num_muscles: s.num_muscles,
                num_shapes: s.num_shapes,
                jaw_pivot_offset: v3(&s.jaw_pivot_offset),
                seed: s.seed,
            },
            flesh: TetMeshFile {
                vertices: to_v3s(a.flesh.vertices()),
                tets: a.flesh.tets().to_vec(),
                boundary: a.flesh.boundary().to_vec(),
                boundary_triangles: a.flesh.boundary_triangles().to_vec(),
                inner_boundary: a.flesh.inner_boundary().to_vec(),
            },
            rig: RigFile {
                shape_names: a.rig.shapes.names.clone(),
                neutral: to_v3s(&a.rig.shapes.neutral),
                deltas: a.rig.shapes.deltas.iter().map(|d| to_v3s(d)).collect(),
                triangles: a.rig.triangles.clone(),
                skin_weights: a.rig.skin.0.clone(),
                jaw_pivot: v3(&a.rig.jaw.pivot),
            },
            anatomy: AnatomyFile {
                material: MaterialFile {
                    mu10: m.mu10,
                    mu01: m.mu01,
                    kappa: m.kappa,
                    k_passive: m.k_passive,
                    sigma_max: m.sigma_max,
                    clamp_sv: m.clamp_sv,
                },
                muscles: a
                    .muscles
                    .iter()
                    .map(|m| MuscleFile {
                        name: m.name.clone(),
                        tets: m.tets.clone(),
                        fibers: to_v3s(&m.fibers),
                        stiffness: m.stiffness,
                        curve: to_v3s(&m.curve),
                        shortening: m.shortening,
                    })
                    .collect(),
                proxies: a
                    .proxies
                    .iter()
                    .map(|p| match p.shape {
                        ProxyShape::Sphere { center, radius } => ProxyFile::Sphere {
                            center: v3(&center),
                            radius,
                            stiffness: p.stiffness,
                        },
                        ProxyShape::HalfSpace { normal, offset } => ProxyFile::HalfSpace {
                            normal: v3(&normal),
                            offset,
                            stiffness: p.stiffness,
                        },
                    })
                    .collect(),
                constrained: a.constrained.clone(),
                surface_to_flesh: a.surface_to_flesh.clone(),
                lip_region: a.lip_region.clone(),
            },
            camera: CameraFile::from(&a.camera),
            plates: PlatesFile {
                gamma: a.plates.gamma,
                albedo: to_v3s(&a.plates.albedo),
                background: v3(&a.plates.background),
                neutral: NEUTRAL_PLATE_FILE.to_string(),
                expression: EXPRESSION_PLATE_FILE.to_string(),
                expression_controls: a.plates.expression_controls.clone(),
                roto: roto_to_file(&a.plates.roto),
            },
        }
    }

    /// Rebuilds the asset; plates are read relative to `dir`.
    pub fn to_asset(&self, dir: &Path) -> Result<Asset, FormatError> {
        let invalid = |e: &dyn std::fmt::Display| FormatError::Invalid(e.to_string());
        let f = &self.flesh;
        let flesh = TetMesh::new(
            to_vec3s(&f.vertices),
            f.tets.clone(),
            f.boundary.clone(),
            f.boundary_triangles.clone(),
            f.inner_boundary.clone(),
        )
        .map_err(|e| invalid(&e))?;
        let r = &self.rig;
        let shapes = Blendshapes::new(
            r.shape_names.clone(),
            to_vec3s(&r.neutral),
            r.deltas.iter().map(|d| to_vec3s(d)).collect(),
        )
        .map_err(|e| invalid(&e))?;
        let skin = SkinWeights::new(r.skin_weights.clone()).map_err(|e| invalid(&e))?;
        let rig = Rig::new(
            shapes,
            r.triangles.clone(),
            JawJoint {
                pivot: vec3(&r.jaw_pivot),
            },
            skin,
        )
        .map_err(|e| invalid(&e))?;
        let an = &self.anatomy;
        let mut constrained = an.constrained.clone();
        constrained.sort_unstable();
        let muscles = an
            .muscles
            .iter()
            .enumerate()
            .map(|(i, m)| {
                Muscle::new(
                    i,
                    m.name.clone(),
                    &flesh,
                    &constrained,
                    m.tets.clone(),
                    to_vec3s(&m.fibers),
                    m.stiffness,
                    to_vec3s(&m.curve),
                    m.shortening,
                )
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| invalid(&e))?;
        if an.surface_to_flesh.len() != rig.num_vertices()
            || an
                .surface_to_flesh
                .iter()
                .any(|&v| v >= flesh.num_vertices())
        {
            return Err(FormatError::Invalid(
                "surface_to_flesh does not match rig and flesh".into(),
            ));
        }
        if constrained.iter().any(|&v| v >= flesh.num_vertices()) {
            return Err(FormatError::Invalid(
                "constrained vertex out of range".into(),
            ));
        }
        if an.lip_region.iter().any(|&t| t >= flesh.tets().len()) {
            return Err(FormatError::Invalid("lip region tet out of range".into()));
        }
        let m = an.material;
        let material = MaterialParams {
            mu10: m.mu10,
            mu01: m.mu01,
            kappa: m.kappa,
            k_passive: m.k_passive,
            sigma_max: m.sigma_max,
            clamp_sv: m.clamp_sv,
        };
        if !material.is_valid() {
            return Err(FormatError::Invalid(
                "material parameters out of range".into(),
            ));
        }
        let proxies = an
            .proxies
            .iter()
            .map(|p| match p {
                ProxyFile::Sphere {
                    center,
                    radius,
                    stiffness,
                } => CollisionProxy::sphere(vec3(center), *radius, *stiffness),
                ProxyFile::HalfSpace {
                    normal,
                    offset,
                    stiffness,
                } => CollisionProxy::half_space(vec3(normal), *offset, *stiffness),
            })
            .collect();
        let p = &self.plates;
        let s = &self.spec;
        Ok(Asset {
            spec: AssetSpec {
                resolution: s.resolution,
                spacing: s.spacing,
                num_muscles: s.num_muscles,
                num_shapes: s.num_shapes,
                jaw_pivot_offset: vec3(&s.jaw_pivot_offset),
                seed: s.seed,
            },
            surface: SurfaceMesh::new(to_vec3s(&r.neutral), r.triangles.clone()),
            flesh,
            rig,
            muscles,
            material,
            proxies,
            camera: self.camera.to_camera(),
            constrained,
            surface_to_flesh: an.surface_to_flesh.clone(),
            lip_region: an.lip_region.clone(),
            plates: SyntheticPlates {
                gamma: p.gamma,
                albedo: to_vec3s(&p.albedo),
                background: vec3(&p.background),
                neutral: read_png(&dir.join(&p.neutral))?,
                expression_controls: p.expression_controls.clone(),
                expression: read_png(&dir.join(&p.expression))?,
                roto: roto_from_file(&p.roto),
            },
        })
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), FormatError> {
    let text = serde_json::to_string_pretty(value).map_err(|source| FormatError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, FormatError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| FormatError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `v` and `f` records; floats use the shortest round-trip form.
pub fn obj_string(positions: &[Vec3], triangles: &[[usize; 3]]) -> String {
    let mut s = String::new();
    for p in positions {
        let _ = writeln!(s, "v {:?} {:?} {:?}", p.x, p.y, p.z);
    }
    for t in triangles {
        let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
    }
    s
}

pub fn write_obj(
    path: &Path,
    positions: &[Vec3],
    triangles: &[[usize; 3]],
) -> Result<(), FormatError> {
    fs::write(path, obj_string(positions, triangles)).map_err(io_err(path))
}

/// Reads vertex positions and triangles. Faces may use `v/vt/vn` syntax.
pub fn read_obj(path: &Path) -> Result<(Vec<Vec3>, Vec<[usize; 3]>), FormatError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let err = |line: usize, message: &str| FormatError::Obj {
        path: path.to_path_buf(),
        line,
        message: message.to_string(),
    };
    let mut verts = Vec::new();
    let mut tris = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let c: Vec<f64> = it
                    .take(3)
                    .map(|t| t.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| err(n + 1, "bad vertex coordinate"))?;
                if c.len() != 3 {
                    return Err(err(n + 1, "vertex needs three coordinates"));
                }
                verts.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let idx: Vec<usize> = it
                    .map(|t| t.split('/').next().unwrap_or("").parse::<usize>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| err(n + 1, "bad face index"))?;
                if idx.len() != 3 || idx.iter().any(|&i| i == 0) {
                    return Err(err(n + 1, "only 1-based triangles are supported"));
                }
                tris.push([idx[0] - 1, idx[1] - 1, idx[2] - 1]);
            }
            _ => {}
        }
    }
    if let Some(t) = tris.iter().find(|t| t.iter().any(|&i| i >= verts.len())) {
        return Err(err(0, &format!("face {t:?} references a missing vertex")));
    }
    Ok((verts, tris))
}

/// 16-bit RGB PNG; values are clamped to `[0, 1]`.
pub fn write_png(path: &Path, img: &Image) -> Result<(), FormatError> {
    let mut buf =
        image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::new(img.width as u32, img.height as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        let v = img.get(x as usize, y as usize);
        *px = image::Rgb([0, 1, 2].map(|c| (v[c].clamp(0.0, 1.0) * 65535.0).round() as u16));
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| FormatError::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub fn read_png(path: &Path) -> Result<Image, FormatError> {
    let img = image::open(path)
        .map_err(|source| FormatError::Image {
            path: path.to_path_buf(),
            source,
        })?
        .into_rgb16();
    let (w, h) = img.dimensions();
    let data = img
        .pixels()
        .map(|p| Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64) / 65535.0)
        .collect();
    Image::new(w as usize, h as usize, data).map_err(|e| FormatError::Invalid(e.to_string()))
}

pub fn write_asset(dir: &Path, asset: &Asset) -> Result<(), FormatError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_json(&dir.join(ASSET_FILE), &AssetFile::from_asset(asset))?;
    write_obj(
        &dir.join(SURFACE_FILE),
        &asset.rig.shapes.neutral,
        &asset.rig.triangles,
    )?;
    write_png(&dir.join(NEUTRAL_PLATE_FILE), &asset.plates.neutral)?;
    write_png(&dir.join(EXPRESSION_PLATE_FILE), &asset.plates.expression)
}

pub fn read_asset(dir: &Path) -> Result<Asset, FormatError> {
    let path = dir.join(ASSET_FILE);
    let file: AssetFile = read_json(&path)?;
    if file.format != ASSET_FORMAT {
        return Err(FormatError::Version {
            path,
            found: file.format,
            expected: ASSET_FORMAT,
        });
    }
    file.to_asset(dir)
}

/// SHA-256 over the asset's files, in a fixed order.
pub fn asset_hash(dir: &Path) -> Result<String, FormatError> {
    let mut h = Sha256::new();
    for name in [
        ASSET_FILE,
        SURFACE_FILE,
        NEUTRAL_PLATE_FILE,
        EXPRESSION_PLATE_FILE,
    ] {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex(&h.finalize()))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes
        .iter()
        .fold(String::with_capacity(2 * bytes.len()), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}
