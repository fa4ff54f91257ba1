//! Procedural slab "face" with a rig, muscles, camera and synthetic plates.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
#[allow(unused_imports)]
use num_traits::Float;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use thiserror::Error;

use crate::anatomy::{precompute_basis, Anatomy, AnatomyError, Muscle, PrecomputedMuscleBasis};
use crate::geometry::{
    assemble_laplacian, CollisionProxy, GeometryError, SurfaceMesh, TetMesh, Vec3,
    VolumetricLaplacian,
};
use crate::imaging::{
    synthesize_plate, Camera, Image, ImagingError, RotoConstraint, RotoPoint, SH_COEFFS,
};
use crate::material::MaterialParams;
use crate::quasistatic::{QuasistaticError, Simulator, SolveSettings};
use crate::rig::{Blendshapes, JawJoint, JawParams, Rig, RigError, SkinWeights, JAW_DOF};

pub const SHAPE_NAMES: [&str; 6] = [
    "pucker",
    "smile_left",
    "smile_right",
    "brow_raise",
    "cheek_puff",
    "lip_press",
];
pub const MUSCLE_NAMES: [&str; 4] = [
    "orbicularis",
    "zygomatic_left",
    "zygomatic_right",
    "frontalis",
];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AssetError {
    #[error("resolution must be at least 2 vertices per axis, got {0:?}")]
    Resolution([usize; 3]),
    #[error("grid spacing must be positive")]
    Spacing,
    #[error("muscle count must be 1..=4, got {0}")]
    MuscleCount(usize),
    #[error("shape count must be 1..=6, got {0}")]
    ShapeCount(usize),
    #[error("muscle `{name}` lies outside the slab")]
    MuscleOutside { name: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Rig(#[from] RigError),
    #[error(transparent)]
    Anatomy(#[from] AnatomyError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Quasistatic(#[from] QuasistaticError),
    #[error("validation failed: {0}")]
    Validation(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssetSpec {
    /// Vertices per axis.
    pub resolution: [usize; 3],
    pub spacing: f64,
    pub num_muscles: usize,
    pub num_shapes: usize,
    /// Jaw pivot relative to the slab's back-bottom edge midpoint.
    pub jaw_pivot_offset: Vec3,
    pub seed: u64,
}

impl Default for AssetSpec {
    fn default() -> Self {
        Self {
            resolution: [12, 8, 4],
            spacing: 0.01,
            num_muscles: 3,
            num_shapes: 6,
            jaw_pivot_offset: Vec3::new(0.0, 0.01, -0.01),
            seed: 7,
        }
    }
}

impl AssetSpec {
    pub fn validate(&self) -> Result<(), AssetError> {
        if self.resolution.iter().any(|&n| n < 2) {
            return Err(AssetError::Resolution(self.resolution));
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(AssetError::Spacing);
        }
        if !(1..=MUSCLE_NAMES.len()).contains(&self.num_muscles) {
            return Err(AssetError::MuscleCount(self.num_muscles));
        }
        if !(1..=SHAPE_NAMES.len()).contains(&self.num_shapes) {
            return Err(AssetError::ShapeCount(self.num_shapes));
        }
        Ok(())
    }

    pub fn extent(&self) -> Vec3 {
        let [nx, ny, nz] = self.resolution;
        Vec3::new((nx - 1) as f64, (ny - 1) as f64, (nz - 1) as f64) * self.spacing
    }
}

/// Ground-truth lighting, albedo and two rendered plates.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPlates {
    pub gamma: [f64; SH_COEFFS],
    pub albedo: Vec<Vec3>,
    pub background: Vec3,
    /// Neutral pose, identity alignment.
    pub neutral: Image,
    /// Controls `[b, j]` rendered into `expression`.
    pub expression_controls: Vec<f64>,
    pub expression: Image,
    pub roto: RotoConstraint,
}

#[derive(Debug, Clone)]
pub struct Asset {
    pub spec: AssetSpec,
    pub flesh: TetMesh,
    pub surface: SurfaceMesh,
    pub rig: Rig,
    pub muscles: Vec<Muscle>,
    pub material: MaterialParams,
    pub proxies: Vec<CollisionProxy>,
    pub camera: Camera,
    /// Kinematic (bottom-layer) flesh vertices, sorted.
    pub constrained: Vec<usize>,
    /// Flesh vertex of each surface vertex.
    pub surface_to_flesh: Vec<usize>,
    /// Tets around the mouth, used for regional volume diagnostics.
    pub lip_region: Vec<usize>,
    pub plates: SyntheticPlates,
}

struct Uniform(ChaCha8Rng);

impl Uniform {
    fn next(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next()
    }
}

fn bump(p: &Vec3, center: &Vec3, radius: f64) -> f64 {
    let d = Vec3::new(p.x - center.x, p.y - center.y, 0.0);
    let q = d.norm_squared() / (radius * radius);
    if q >= 1.0 {
        0.0
    } else {
        (1.0 - q).powi(3)
    }
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Regular grid split into six Kuhn tets per cell. The top layer is the outer
/// boundary and the bottom layer the inner boundary.
pub fn slab_mesh(resolution: [usize; 3], spacing: f64) -> Result<TetMesh, GeometryError> {
    let [nx, ny, nz] = resolution;
    let idx = |i: usize, j: usize, k: usize| (k * ny + j) * nx + i;
    let mut verts = Vec::with_capacity(nx * ny * nz);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                verts.push(Vec3::new(i as f64, j as f64, k as f64) * spacing);
            }
        }
    }
    let perms = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    let mut tets = Vec::with_capacity(6 * (nx - 1) * (ny - 1) * (nz - 1));
    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                for p in perms {
                    let mut c = [i, j, k];
                    let mut t = [idx(i, j, k); 4];
                    for (s, &axis) in p.iter().enumerate() {
                        c[axis] += 1;
                        t[s + 1] = idx(c[0], c[1], c[2]);
                    }
                    let e = |a: usize| verts[t[a]] - verts[t[0]];
                    if e(1).cross(&e(2)).dot(&e(3)) < 0.0 {
                        t.swap(2, 3);
                    }
                    tets.push(t);
                }
            }
        }
    }
    let top: Vec<usize> = (0..ny)
        .flat_map(|j| (0..nx).map(move |i| idx(i, j, nz - 1)))
        .collect();
    let bottom: Vec<usize> = (0..ny)
        .flat_map(|j| (0..nx).map(move |i| idx(i, j, 0)))
        .collect();
    let mut tris = Vec::with_capacity(2 * (nx - 1) * (ny - 1));
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let a = idx(i, j, nz - 1);
            let b = idx(i + 1, j, nz - 1);
            let c = idx(i + 1, j + 1, nz - 1);
            let d = idx(i, j + 1, nz - 1);
            tris.push([a, b, c]);
            tris.push([a, c, d]);
        }
    }
    TetMesh::new(verts, tets, top, tris, bottom)
}

fn shape_delta(name: &str, p: &Vec3, center: &Vec3, radius: f64, amp: f64, ext: &Vec3) -> Vec3 {
    let w = bump(p, center, radius);
    match name {
        "pucker" => {
            Vec3::new(
                -(p.x - center.x) * 0.5,
                -(p.y - center.y) * 0.5,
                -0.1 * radius,
            ) * (amp * w)
        }
        "smile_left" => Vec3::new(-0.006, 0.004, 0.002) * (amp * w),
        "smile_right" => Vec3::new(0.006, 0.004, 0.002) * (amp * w),
        "brow_raise" => Vec3::new(0.0, 0.005, 0.002) * (amp * w),
        "cheek_puff" => {
            let mirror = Vec3::new(ext.x - center.x, center.y, center.z);
            let w2 = bump(p, &mirror, radius);
            Vec3::new(0.0, 0.0, 0.006) * (amp * (w + w2))
        }
        _ => Vec3::new(0.0, 0.0, -0.004) * (amp * w),
    }
}

fn shape_site(name: &str, ext: &Vec3) -> (Vec3, f64) {
    let (x, y, r) = match name {
        "pucker" => (0.5, 0.3, 0.3),
        "smile_left" => (0.25, 0.3, 0.22),
        "smile_right" => (0.75, 0.3, 0.22),
        "brow_raise" => (0.5, 0.85, 0.35),
        "cheek_puff" => (0.2, 0.55, 0.2),
        _ => (0.5, 0.2, 0.2),
    };
    (Vec3::new(x * ext.x, y * ext.y, ext.z), r * ext.x)
}

fn muscle_curve(name: &str, ext: &Vec3, rng: &mut Uniform) -> Vec<Vec3> {
    let z = 0.5 * ext.z + rng.range(-0.05, 0.05) * ext.z;
    let at = |x: f64, y: f64| Vec3::new(x * ext.x, y * ext.y, z);
    match name {
        "orbicularis" => {
            let r = 0.18 + rng.range(-0.01, 0.01);
            (0..=8)
                .map(|k| {
                    let t = PI * (0.15 + 0.7 * k as f64 / 8.0);
                    at(0.5 + r * t.cos(), 0.3 + r * ext.x / ext.y * t.sin() * 0.8)
                })
                .collect()
        }
        "zygomatic_left" => vec![at(0.3, 0.32), at(0.2, 0.55), at(0.1, 0.78)],
        "zygomatic_right" => vec![at(0.7, 0.32), at(0.8, 0.55), at(0.9, 0.78)],
        _ => vec![at(0.5, 0.6), at(0.5, 0.75), at(0.5, 0.9)],
    }
}

fn segment_distance(p: &Vec3, a: &Vec3, b: &Vec3) -> (f64, Vec3) {
    let d = b - a;
    let t = ((p - a).dot(&d) / d.norm_squared()).clamp(0.0, 1.0);
    ((p - (a + d * t)).norm(), d.normalize())
}

fn build_muscle(
    index: usize,
    flesh: &TetMesh,
    constrained: &[usize],
    curve: Vec<Vec3>,
    radius: f64,
    stiffness: f64,
) -> Result<Muscle, AssetError> {
    let name = MUSCLE_NAMES[index].to_string();
    let (lo, hi) = bounds(flesh.vertices());
    if curve
        .iter()
        .any(|c| (0..3).any(|a| c[a] < lo[a] || c[a] > hi[a]))
    {
        return Err(AssetError::MuscleOutside { name });
    }
    let mut tets = Vec::new();
    let mut fibers = Vec::new();
    for t in 0..flesh.tets().len() {
        let c = flesh.centroid(t);
        let (dist, dir) = curve
            .windows(2)
            .map(|s| segment_distance(&c, &s[0], &s[1]))
            .fold((f64::INFINITY, Vec3::x()), |best, cur| {
                if cur.0 < best.0 {
                    cur
                } else {
                    best
                }
            });
        if dist < radius {
            tets.push(t);
            fibers.push(dir);
        }
    }
    if tets.is_empty() {
        return Err(AssetError::MuscleOutside { name });
    }
    Muscle::new(
        index,
        name.clone(),
        flesh,
        constrained,
        tets,
        fibers,
        stiffness,
        curve,
        crate::anatomy::DEFAULT_SHORTENING,
    )
    .map_err(|e| match e {
        AnatomyError::Embedding { .. } => AssetError::MuscleOutside { name },
        e => e.into(),
    })
}

fn bounds(points: &[Vec3]) -> (Vec3, Vec3) {
    points.iter().fold(
        (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)),
        |(lo, hi), p| (lo.inf(p), hi.sup(p)),
    )
}

/// Builds the asset. Fully determined by `spec`.
pub fn generate(spec: &AssetSpec) -> Result<Asset, AssetError> {
    spec.validate()?;
    let mut rng = Uniform(ChaCha8Rng::seed_from_u64(spec.seed));
    let ext = spec.extent();
    let h = spec.spacing;
    let flesh = slab_mesh(spec.resolution, h)?;
    let surface_to_flesh = flesh.boundary().to_vec();
    let mut flesh_to_surface = vec![usize::MAX; flesh.num_vertices()];
    for (s, &f) in surface_to_flesh.iter().enumerate() {
        flesh_to_surface[f] = s;
    }
    let neutral: Vec<Vec3> = surface_to_flesh
        .iter()
        .map(|&v| flesh.vertices()[v])
        .collect();
    let triangles: Vec<[usize; 3]> = flesh
        .boundary_triangles()
        .iter()
        .map(|t| t.map(|v| flesh_to_surface[v]))
        .collect();

    let mut names = Vec::new();
    let mut deltas = Vec::new();
    for &name in &SHAPE_NAMES[..spec.num_shapes] {
        let (mut center, radius) = shape_site(name, &ext);
        center.x += rng.range(-0.3, 0.3) * h;
        center.y += rng.range(-0.3, 0.3) * h;
        let amp = rng.range(0.9, 1.1);
        names.push(name.to_string());
        deltas.push(
            neutral
                .iter()
                .map(|p| shape_delta(name, p, &center, radius, amp, &ext))
                .collect(),
        );
    }
    let shapes = Blendshapes::new(names, neutral.clone(), deltas)?;
    let skin = SkinWeights::new(
        neutral
            .iter()
            .map(|p| 1.0 - smoothstep(0.1 * ext.y, 0.45 * ext.y, p.y))
            .collect(),
    )?;
    let jaw = JawJoint {
        pivot: Vec3::new(0.5 * ext.x, ext.y, 0.0) + spec.jaw_pivot_offset,
    };
    let rig = Rig::new(shapes, triangles.clone(), jaw, skin)?;

    let material = MaterialParams::default();
    let stiffness = 10.0 * (material.mu10 + material.mu01) * h;
    let constrained = flesh.inner_boundary().to_vec();
    let mut muscles = Vec::new();
    for m in 0..spec.num_muscles {
        let curve = muscle_curve(MUSCLE_NAMES[m], &ext, &mut rng);
        muscles.push(build_muscle(
            m,
            &flesh,
            &constrained,
            curve,
            0.9 * h,
            stiffness,
        )?);
    }

    let proxies = vec![CollisionProxy::sphere(
        Vec3::new(0.5 * ext.x, 0.3 * ext.y, -0.04),
        0.04 + 0.5 * h,
        1e5,
    )];
    let camera = Camera::looking_down(
        Vec3::new(0.5 * ext.x, 0.5 * ext.y, ext.z + 0.22),
        1200.0,
        720,
        540,
    );

    let (pucker, pucker_radius) = shape_site("pucker", &ext);
    let lip_region = (0..flesh.tets().len())
        .filter(|&t| {
            let c = flesh.centroid(t);
            (c.x - pucker.x).hypot(c.y - pucker.y) < pucker_radius
        })
        .collect();

    let gamma = [
        1.9 + rng.range(-0.1, 0.1),
        0.15,
        0.6 + rng.range(-0.05, 0.05),
        -0.2,
        0.05,
        0.02,
        -0.04,
        0.03,
        0.01,
    ];
    let albedo = vec![Vec3::new(0.72, 0.54, 0.46); neutral.len()];
    let background = Vec3::repeat(0.05);
    let neutral_plate =
        synthesize_plate(&camera, &neutral, &triangles, &gamma, &albedo, background)?;
    let mut controls: Vec<f64> = (0..spec.num_shapes).map(|_| rng.range(0.15, 0.5)).collect();
    let mut j = [0.0; JAW_DOF];
    j[0] = rng.range(0.02, 0.04);
    controls.extend_from_slice(&j);
    let (b, jp) = controls.split_at(spec.num_shapes);
    let posed = rig.surface(b, &JawParams::from_slice(jp));
    let expression = synthesize_plate(&camera, &posed, &triangles, &gamma, &albedo, background)?;
    let roto = roto_points(&camera, &posed, &triangles)?;

    Ok(Asset {
        spec: *spec,
        surface: SurfaceMesh::new(neutral, triangles),
        flesh,
        rig,
        muscles,
        material,
        proxies,
        camera,
        constrained,
        surface_to_flesh,
        lip_region,
        plates: SyntheticPlates {
            gamma,
            albedo,
            background,
            neutral: neutral_plate,
            expression_controls: controls,
            expression,
            roto,
        },
    })
}

/// Three interior points per triangle, targeted at their projections.
fn roto_points(
    camera: &Camera,
    posed: &[Vec3],
    triangles: &[[usize; 3]],
) -> Result<RotoConstraint, AssetError> {
    let mut points = Vec::with_capacity(3 * triangles.len());
    for tri in triangles {
        for bary in [[0.6, 0.2, 0.2], [0.2, 0.6, 0.2], [0.2, 0.2, 0.6]] {
            let x = posed[tri[0]] * bary[0] + posed[tri[1]] * bary[1] + posed[tri[2]] * bary[2];
            let (u, v, _) = camera.project(&x)?;
            points.push(RotoPoint {
                triangle: *tri,
                barycentric: bary,
                target: [u, v],
            });
        }
    }
    Ok(RotoConstraint { points })
}

impl Asset {
    pub fn anatomy(&self) -> Anatomy {
        Anatomy {
            flesh: self.flesh.clone(),
            muscles: self.muscles.clone(),
            material: self.material,
            proxies: self.proxies.clone(),
            constrained: self.constrained.clone(),
            surface_to_flesh: self.surface_to_flesh.clone(),
        }
    }

    pub fn laplacian(&self) -> Result<VolumetricLaplacian, AssetError> {
        Ok(assemble_laplacian(&self.flesh, &self.surface_to_flesh)?
            .with_surface_correspondence(self.surface_to_flesh.clone()))
    }

    pub fn precompute(&self) -> Result<PrecomputedMuscleBasis, AssetError> {
        Ok(precompute_basis(
            &self.flesh,
            &self.rig,
            &self.muscles,
            &self.laplacian()?,
        )?)
    }

    pub fn bounding_box_diagonal(&self) -> f64 {
        crate::geometry::bounding_box_diagonal(&self.surface.vertices)
    }

    /// Checks the asset against the invariants downstream modules rely on.
    pub fn validate(&self, basis: &PrecomputedMuscleBasis) -> Result<(), AssetError> {
        let fail = |m: String| Err(AssetError::Validation(m));
        if self.flesh.rest_volumes().iter().any(|&v| !(v > 0.0)) {
            return fail("nonpositive rest volume".into());
        }
        for m in &self.muscles {
            if m.fibers.iter().any(|f| (f.norm() - 1.0).abs() > 1e-12) {
                return fail(format!("muscle `{}` has a non-unit fiber", m.name));
            }
            let len =
                crate::anatomy::curve_length(&m.curve_embedding.reconstruct(self.flesh.vertices()));
            if (len - m.rest_length).abs() > 1e-10 {
                return fail(format!("muscle `{}` rest length mismatch", m.name));
            }
            let stored = crate::anatomy::curve_length(&m.curve);
            if (stored - m.rest_length).abs() > 1e-10 {
                return fail(format!(
                    "muscle `{}` curve does not round-trip its embedding",
                    m.name
                ));
            }
        }
        for (k, d) in self.rig.shapes.deltas.iter().enumerate() {
            if d.iter().all(|v| *v == Vec3::zeros()) {
                return fail(format!("shape {k} has no displacement"));
            }
        }
        let anatomy = self.anatomy();
        let sim = Simulator::new(&anatomy, basis, SolveSettings::default())?;
        let k = self.rig.num_shapes();
        let rest = sim.solve(&vec![0.0; k], &JawParams::default(), None)?;
        if rest.iterations != 0 || !rest.is_converged() {
            return fail(format!(
                "rest pose not in equilibrium (residual {:e})",
                rest.residual
            ));
        }
        Ok(())
    }
}
