//! `facecap` command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use facecap_core::assets::{generate, AssetSpec};
use facecap_core::capture::{
    fit_geometry, fit_image, fit_lighting, BlendshapeDeformer, CaptureError, Deformer,
    DoglegSettings, ImageTargets, ImageWeights, SimulationDeformer, LAMBDA_GEOMETRY,
    LAMBDA_LIGHTING, LAMBDA_REFINE_PRIOR, LAMBDA_REFINE_ROTO, LAMBDA_ROTO,
};
use facecap_core::geometry::Vec3;
use facecap_core::imaging::{ImagePyramid, DEFAULT_LEVEL_WEIGHTS, SH_COEFFS};
use facecap_core::quasistatic::{Simulator, SolveSettings};
use facecap_core::rig::{IdentityControls, JawParams, JAW_DOF};
use facecap_core::sensitivity::RigidTransform;
use serde::{Deserialize, Serialize};

use crate::cache::{write_cache, CacheError};
use crate::formats::{
    self, asset_hash, read_json, read_obj, read_png, roto_from_file, to_v3s, to_vec3s, write_json,
    write_obj, RotoPointFile, V3,
};
use crate::gradcheck::{format_table, gradcheck, DEFAULT_STEP};
use crate::parallel::{default_threads, Threaded, THREADS_ENV};
use crate::pipeline::{DeformerKind, ReportFile, Session, SessionError, VolumeFile};

#[derive(Debug, Parser)]
#[command(
    name = "facecap",
    version,
    about = "Muscle-simulation face capture on procedural assets"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args, Default)]
pub struct CommonArgs {
    /// Asset directory.
    #[arg(long, global = true)]
    pub asset: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub deformer: Option<DeformerKind>,
    #[arg(long, global = true)]
    pub lambda_geometry: Option<f64>,
    #[arg(long, global = true)]
    pub lambda_lighting: Option<f64>,
    #[arg(long, global = true)]
    pub lambda_roto: Option<f64>,
    #[arg(long, global = true)]
    pub lambda_refine_roto: Option<f64>,
    #[arg(long, global = true)]
    pub lambda_refine_prior: Option<f64>,
    /// Worker threads for sensitivity solves.
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Solve every equilibrium from the morph instead of the previous state.
    #[arg(long, global = true)]
    pub cold_start: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a procedural asset.
    GenAsset {
        #[arg(long)]
        muscles: Option<usize>,
        #[arg(long)]
        shapes: Option<usize>,
        /// Vertices per axis, e.g. `12,8,4`.
        #[arg(long, value_parser = parse_resolution)]
        resolution: Option<[usize; 3]>,
    },
    /// Build the muscle basis cache for an asset.
    Precompute,
    /// Solve one equilibrium.
    Simulate {
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        b: Vec<f64>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        j: Vec<f64>,
    },
    /// Fit controls and rigid alignment to a corresponding target surface.
    FitGeometry {
        /// OBJ with the asset's surface vertex order.
        #[arg(long)]
        target: PathBuf,
    },
    /// Fit SH lighting and albedo to a plate at the neutral pose.
    FitLighting {
        /// Defaults to the asset's neutral plate.
        #[arg(long)]
        plate: Option<PathBuf>,
    },
    /// Roto initialization and shading refinement against a plate.
    FitImage {
        /// Output of `fit-lighting`.
        #[arg(long)]
        lighting: PathBuf,
        /// Defaults to the asset's expression plate.
        #[arg(long)]
        plate: Option<PathBuf>,
        /// JSON list of roto points; defaults to the asset's.
        #[arg(long)]
        roto: Option<PathBuf>,
    },
    /// Compare sensitivity columns with finite differences.
    Gradcheck {
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        b: Vec<f64>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        j: Vec<f64>,
        #[arg(long, default_value_t = DEFAULT_STEP)]
        step: f64,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenAsset { .. } => "gen-asset",
            Command::Precompute => "precompute",
            Command::Simulate { .. } => "simulate",
            Command::FitGeometry { .. } => "fit-geometry",
            Command::FitLighting { .. } => "fit-lighting",
            Command::FitImage { .. } => "fit-image",
            Command::Gradcheck { .. } => "gradcheck",
        }
    }
}

fn parse_resolution(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    v.try_into()
        .map_err(|_| "expected three comma-separated counts".to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Lambdas {
    pub geometry: f64,
    pub lighting: f64,
    pub roto: f64,
    pub refine_roto: f64,
    pub refine_prior: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Self {
            geometry: LAMBDA_GEOMETRY,
            lighting: LAMBDA_LIGHTING,
            roto: LAMBDA_ROTO,
            refine_roto: LAMBDA_REFINE_ROTO,
            refine_prior: LAMBDA_REFINE_PRIOR,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOverrides {
    pub relative_tolerance: f64,
    pub newton_iterations: usize,
    pub dogleg_iterations: usize,
    pub gradient_tolerance: f64,
}

impl Default for SolverOverrides {
    fn default() -> Self {
        let s = SolveSettings::default();
        let d = DoglegSettings::default();
        Self {
            relative_tolerance: s.relative_tolerance,
            newton_iterations: s.max_iterations,
            dogleg_iterations: d.max_iterations,
            gradient_tolerance: d.gradient_tolerance,
        }
    }
}

/// File configuration; every key is optional and unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub asset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub deformer: Option<DeformerKind>,
    pub lambda: Lambdas,
    pub solver: SolverOverrides,
    pub threads: Option<usize>,
    pub seed: Option<u64>,
    pub cold_start: bool,
}

/// Configuration after merging file and flags.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Resolved {
    pub subcommand: String,
    pub asset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub deformer: DeformerKind,
    pub lambda: Lambdas,
    pub solver: SolverOverrides,
    pub threads: usize,
    pub seed: u64,
    pub cold_start: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Solver(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Solver(_) => 1,
        }
    }
}

impl From<formats::FormatError> for CliError {
    fn from(e: formats::FormatError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<SessionError> for CliError {
    fn from(e: SessionError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<CacheError> for CliError {
    fn from(e: CacheError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<CaptureError> for CliError {
    fn from(e: CaptureError) -> Self {
        match e {
            CaptureError::Dimension { .. } | CaptureError::NoDataTerm | CaptureError::Settings => {
                CliError::Input(e.to_string())
            }
            e => CliError::Solver(e.to_string()),
        }
    }
}

pub fn resolve(cli: &Cli) -> Result<Resolved, CliError> {
    let file: RunConfig = match &cli.common.config {
        Some(p) => read_json(p).map_err(|e| CliError::Input(e.to_string()))?,
        None => RunConfig::default(),
    };
    let c = &cli.common;
    let mut lambda = file.lambda;
    for (slot, flag) in [
        (&mut lambda.geometry, c.lambda_geometry),
        (&mut lambda.lighting, c.lambda_lighting),
        (&mut lambda.roto, c.lambda_roto),
        (&mut lambda.refine_roto, c.lambda_refine_roto),
        (&mut lambda.refine_prior, c.lambda_refine_prior),
    ] {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    if [
        lambda.geometry,
        lambda.lighting,
        lambda.roto,
        lambda.refine_roto,
        lambda.refine_prior,
    ]
    .iter()
    .any(|v| !(*v >= 0.0 && v.is_finite()))
    {
        return Err(CliError::Input(
            "energy weights must be finite and nonnegative".into(),
        ));
    }
    let threads = c.threads.or(file.threads).unwrap_or_else(default_threads);
    if threads == 0 {
        return Err(CliError::Input("--threads must be positive".into()));
    }
    let resolved = Resolved {
        subcommand: cli.command.name().to_string(),
        asset: c.asset.clone().or(file.asset),
        out: c.out.clone().or(file.out),
        deformer: c
            .deformer
            .or(file.deformer)
            .unwrap_or(DeformerKind::Simulation),
        lambda,
        solver: file.solver,
        threads,
        seed: c.seed.or(file.seed).unwrap_or(AssetSpec::default().seed),
        cold_start: c.cold_start || file.cold_start,
    };
    if let Some(a) = &resolved.asset {
        if !matches!(cli.command, Command::GenAsset { .. }) && !a.is_dir() {
            return Err(CliError::Input(format!(
                "asset directory {} does not exist",
                a.display()
            )));
        }
    }
    Ok(resolved)
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    config: &'a Resolved,
    asset_hash: Option<String>,
    outputs: Vec<String>,
}

fn write_manifest(
    out: &Path,
    cfg: &Resolved,
    hash: Option<String>,
    outputs: &[&str],
) -> Result<(), CliError> {
    let m = Manifest {
        tool: "facecap",
        version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        asset_hash: hash,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    Ok(write_json(&out.join("manifest.json"), &m)?)
}

fn need_asset(cfg: &Resolved) -> Result<&Path, CliError> {
    cfg.asset
        .as_deref()
        .ok_or_else(|| CliError::Input("--asset is required".into()))
}

fn need_out(cfg: &Resolved) -> Result<&Path, CliError> {
    let out = cfg
        .out
        .as_deref()
        .ok_or_else(|| CliError::Input("--out is required".into()))?;
    std::fs::create_dir_all(out).map_err(|e| CliError::Input(format!("{}: {e}", out.display())))?;
    Ok(out)
}

fn parse_controls(
    session: &Session,
    b: &[f64],
    j: &[f64],
) -> Result<(Vec<f64>, JawParams), CliError> {
    let k = session.num_shapes();
    let b = if b.is_empty() {
        vec![0.0; k]
    } else {
        b.to_vec()
    };
    let j = if j.is_empty() {
        vec![0.0; JAW_DOF]
    } else {
        j.to_vec()
    };
    if b.len() != k {
        return Err(CliError::Input(format!(
            "--b needs {k} values, got {}",
            b.len()
        )));
    }
    if j.len() != JAW_DOF {
        return Err(CliError::Input(format!(
            "--j needs {JAW_DOF} values, got {}",
            j.len()
        )));
    }
    if b.iter().chain(&j).any(|v| !v.is_finite()) {
        return Err(CliError::Input("controls must be finite".into()));
    }
    Ok((b, JawParams::from_slice(&j)))
}

fn solve_settings(cfg: &Resolved) -> SolveSettings {
    SolveSettings {
        relative_tolerance: cfg.solver.relative_tolerance,
        max_iterations: cfg.solver.newton_iterations,
        ..SolveSettings::default()
    }
}

fn dogleg_settings(cfg: &Resolved) -> DoglegSettings {
    DoglegSettings {
        max_iterations: cfg.solver.dogleg_iterations,
        gradient_tolerance: cfg.solver.gradient_tolerance,
        ..DoglegSettings::default()
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StateFile {
    pub b: Vec<f64>,
    pub j: Vec<f64>,
    pub activations: Vec<f64>,
    pub lengths: Vec<f64>,
    pub residual: f64,
    pub tolerance: f64,
    pub iterations: usize,
    pub status: String,
    pub positions: Vec<V3>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RigidFile {
    pub angles: V3,
    pub translation: V3,
}

impl From<&RigidTransform> for RigidFile {
    fn from(r: &RigidTransform) -> Self {
        Self {
            angles: formats::v3(&r.angles),
            translation: formats::v3(&r.translation),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GeometryFitFile {
    pub deformer: DeformerKind,
    pub w: Vec<f64>,
    pub rigid: RigidFile,
    pub rmse: f64,
    pub report: ReportFile,
    pub volume: VolumeFile,
    pub activations: Option<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LightingFile {
    pub gamma: [f64; SH_COEFFS],
    pub albedo: Vec<V3>,
    pub report: ReportFile,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ImageFitFile {
    pub deformer: DeformerKind,
    pub w_hat: Vec<f64>,
    pub w: Vec<f64>,
    pub stage1: ReportFile,
    pub stage2: ReportFile,
    pub activations: Option<Vec<f64>>,
}

/// Runs a command with a deformer of the configured kind.
fn with_deformer<R>(
    session: &Session,
    cfg: &Resolved,
    f: impl FnOnce(&mut dyn Deformer) -> Result<R, CliError>,
) -> Result<(R, Option<facecap_core::quasistatic::EquilibriumState>), CliError> {
    let controls = IdentityControls {
        num_shapes: session.num_shapes(),
    };
    match cfg.deformer {
        DeformerKind::Blendshape => {
            let mut d = BlendshapeDeformer {
                rig: &session.asset.rig,
                controls: &controls,
            };
            Ok((f(&mut d)?, None))
        }
        DeformerKind::Simulation => {
            let sim = Simulator::new(&session.anatomy, &session.basis, solve_settings(cfg))
                .map_err(|e| CliError::Input(e.to_string()))?;
            let threaded = Threaded {
                threads: cfg.threads,
            };
            let mut d = SimulationDeformer::new(sim, &controls).map_err(CliError::from)?;
            d.columns = &threaded;
            d.cold_start = cfg.cold_start;
            let r = f(&mut d)?;
            Ok((r, d.last_state().cloned()))
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve(cli)?;
    match &cli.command {
        Command::GenAsset {
            muscles,
            shapes,
            resolution,
        } => {
            let d = AssetSpec::default();
            let spec = AssetSpec {
                resolution: resolution.unwrap_or(d.resolution),
                num_muscles: muscles.unwrap_or(d.num_muscles),
                num_shapes: shapes.unwrap_or(d.num_shapes),
                seed: cfg.seed,
                ..d
            };
            let out = need_out(&cfg)?;
            let asset = generate(&spec).map_err(|e| CliError::Input(e.to_string()))?;
            let basis = asset
                .precompute()
                .map_err(|e| CliError::Input(e.to_string()))?;
            asset
                .validate(&basis)
                .map_err(|e| CliError::Solver(e.to_string()))?;
            formats::write_asset(out, &asset)?;
            let hash = asset_hash(out)?;
            write_manifest(
                out,
                &cfg,
                Some(hash),
                &[formats::ASSET_FILE, formats::SURFACE_FILE],
            )?;
            println!("wrote asset to {}", out.display());
        }
        Command::Precompute => {
            let dir = need_asset(&cfg)?;
            let asset = formats::read_asset(dir)?;
            let hash = asset_hash(dir)?;
            let basis = asset
                .precompute()
                .map_err(|e| CliError::Solver(e.to_string()))?;
            let path = write_cache(dir, &hash, &basis)?;
            println!(
                "wrote {} ({} shape fields)",
                path.display(),
                basis.flesh_displacements.len()
            );
        }
        Command::Simulate { b, j } => {
            let session = Session::load(need_asset(&cfg)?)?;
            let (b, j) = parse_controls(&session, b, j)?;
            let out = need_out(&cfg)?;
            let sim = Simulator::new(&session.anatomy, &session.basis, solve_settings(&cfg))
                .map_err(|e| CliError::Input(e.to_string()))?;
            let state = sim
                .solve(&b, &j, None)
                .map_err(|e| CliError::Solver(e.to_string()))?;
            let surface: Vec<Vec3> = session
                .anatomy
                .surface_to_flesh
                .iter()
                .map(|&v| state.positions[v])
                .collect();
            write_obj(
                &out.join("surface.obj"),
                &surface,
                &session.asset.rig.triangles,
            )?;
            write_json(
                &out.join("state.json"),
                &StateFile {
                    b: b.clone(),
                    j: j.0.to_vec(),
                    activations: state.activations.clone(),
                    lengths: state.lengths.clone(),
                    residual: state.residual,
                    tolerance: state.tolerance,
                    iterations: state.iterations,
                    status: format!("{:?}", state.status),
                    positions: to_v3s(&state.positions),
                },
            )?;
            write_manifest(
                out,
                &cfg,
                Some(session.hash.clone()),
                &["surface.obj", "state.json"],
            )?;
            if !state.is_converged() {
                return Err(CliError::Solver(format!(
                    "equilibrium did not converge ({:?}, residual {:e})",
                    state.status, state.residual
                )));
            }
            println!("converged in {} iterations", state.iterations);
        }
        Command::FitGeometry { target } => {
            let session = Session::load(need_asset(&cfg)?)?;
            let (target, _) = read_obj(target)?;
            if target.len() != session.asset.rig.num_vertices() {
                return Err(CliError::Input(format!(
                    "target has {} vertices, rig has {}",
                    target.len(),
                    session.asset.rig.num_vertices()
                )));
            }
            let out = need_out(&cfg)?;
            let settings = dogleg_settings(&cfg);
            let tris = &session.asset.rig.triangles;
            let (fit, state) = with_deformer(&session, &cfg, |d| {
                Ok(fit_geometry(
                    d,
                    tris,
                    &target,
                    cfg.lambda.geometry,
                    &settings,
                )?)
            })?;
            let k = session.num_shapes();
            let volume = match &state {
                Some(s) => session.simulation_volume(s),
                None => {
                    let unaligned = fit.rigid.inverse_apply(&fit.surface);
                    session.blendshape_volume(&unaligned, &JawParams::from_slice(&fit.w[k..]))?
                }
            };
            write_obj(&out.join("fitted.obj"), &fit.surface, tris)?;
            write_json(
                &out.join("fit.json"),
                &GeometryFitFile {
                    deformer: cfg.deformer,
                    w: fit.w.clone(),
                    rigid: RigidFile::from(&fit.rigid),
                    rmse: fit.rmse,
                    report: ReportFile::from(&fit.report),
                    volume: volume.into(),
                    activations: state.map(|s| s.activations),
                },
            )?;
            write_manifest(
                out,
                &cfg,
                Some(session.hash.clone()),
                &["fitted.obj", "fit.json"],
            )?;
            println!(
                "rmse {:e} after {} iterations",
                fit.rmse, fit.report.iterations
            );
        }
        Command::FitLighting { plate } => {
            let session = Session::load(need_asset(&cfg)?)?;
            let image = match plate {
                Some(p) => read_png(p)?,
                None => session.asset.plates.neutral.clone(),
            };
            let out = need_out(&cfg)?;
            let a = &session.asset;
            let fit = fit_lighting(
                &a.camera,
                &a.rig.triangles,
                &ImagePyramid::new(image, 1),
                &a.rig.shapes.neutral,
                cfg.lambda.lighting,
                &dogleg_settings(&cfg),
            )?;
            write_json(
                &out.join("lighting.json"),
                &LightingFile {
                    gamma: fit.gamma,
                    albedo: to_v3s(&fit.albedo),
                    report: ReportFile::from(&fit.report),
                },
            )?;
            write_manifest(out, &cfg, Some(session.hash.clone()), &["lighting.json"])?;
            println!(
                "lighting cost {:e} -> {:e}",
                fit.report.initial_cost, fit.report.final_cost
            );
        }
        Command::FitImage {
            lighting,
            plate,
            roto,
        } => {
            let session = Session::load(need_asset(&cfg)?)?;
            let light: LightingFile = read_json(lighting)?;
            let a = &session.asset;
            if light.albedo.len() != a.rig.num_vertices() {
                return Err(CliError::Input(
                    "lighting albedo does not match the rig".into(),
                ));
            }
            let image = match plate {
                Some(p) => read_png(p)?,
                None => a.plates.expression.clone(),
            };
            let roto = match roto {
                Some(p) => roto_from_file(&read_json::<Vec<RotoPointFile>>(p)?),
                None => a.plates.roto.clone(),
            };
            if roto
                .points
                .iter()
                .any(|p| p.triangle.iter().any(|&v| v >= a.rig.num_vertices()))
            {
                return Err(CliError::Input(
                    "roto point references a missing vertex".into(),
                ));
            }
            let out = need_out(&cfg)?;
            let pyramid = ImagePyramid::new(image, DEFAULT_LEVEL_WEIGHTS.len());
            let albedo = to_vec3s(&light.albedo);
            let targets = ImageTargets {
                camera: &a.camera,
                plate: &pyramid,
                roto: &roto,
                gamma: light.gamma,
                albedo: &albedo,
                level_weights: &DEFAULT_LEVEL_WEIGHTS,
            };
            let weights = ImageWeights {
                roto: cfg.lambda.roto,
                refine_roto: cfg.lambda.refine_roto,
                refine_prior: cfg.lambda.refine_prior,
            };
            let settings = dogleg_settings(&cfg);
            let (fit, state) = with_deformer(&session, &cfg, |d| {
                Ok(fit_image(
                    d,
                    &a.rig.triangles,
                    &targets,
                    RigidTransform::default(),
                    false,
                    &weights,
                    &settings,
                )?)
            })?;
            let surface = {
                let controls = IdentityControls {
                    num_shapes: session.num_shapes(),
                };
                match &state {
                    Some(s) => a.surface_to_flesh.iter().map(|&v| s.positions[v]).collect(),
                    None => BlendshapeDeformer {
                        rig: &a.rig,
                        controls: &controls,
                    }
                    .surface(&fit.w)?,
                }
            };
            write_obj(&out.join("fitted.obj"), &surface, &a.rig.triangles)?;
            write_json(
                &out.join("fit.json"),
                &ImageFitFile {
                    deformer: cfg.deformer,
                    w_hat: fit.w_hat.clone(),
                    w: fit.w.clone(),
                    stage1: ReportFile::from(&fit.stage1),
                    stage2: ReportFile::from(&fit.stage2),
                    activations: state.map(|s| s.activations),
                },
            )?;
            write_manifest(
                out,
                &cfg,
                Some(session.hash.clone()),
                &["fitted.obj", "fit.json"],
            )?;
            println!(
                "stage 1: {} iterations, stage 2: {} iterations",
                fit.stage1.iterations, fit.stage2.iterations
            );
        }
        Command::Gradcheck { b, j, step } => {
            let session = Session::load(need_asset(&cfg)?)?;
            let (b, j) = if b.is_empty() && j.is_empty() {
                default_gradcheck_point(session.num_shapes())
            } else {
                parse_controls(&session, b, j)?
            };
            if !(*step > 0.0) {
                return Err(CliError::Input("--step must be positive".into()));
            }
            let rows = gradcheck(&session.anatomy, &session.basis, &b, &j, *step, cfg.threads)
                .map_err(|e| CliError::Solver(e.to_string()))?;
            print!("{}", format_table(&rows));
            if let Some(out) = &cfg.out {
                std::fs::create_dir_all(out).map_err(|e| CliError::Input(e.to_string()))?;
                write_json(&out.join("gradcheck.json"), &rows)?;
                write_manifest(out, &cfg, Some(session.hash.clone()), &["gradcheck.json"])?;
            }
            if let Some(bad) = rows.iter().find(|r| !r.passes()) {
                return Err(CliError::Solver(format!(
                    "column {} ({}) relative error {:e}",
                    bad.param, bad.name, bad.rel_err
                )));
            }
        }
    }
    Ok(())
}

/// A generic interior pose: moderate weights and a small jaw opening.
pub fn default_gradcheck_point(num_shapes: usize) -> (Vec<f64>, JawParams) {
    let b = (0..num_shapes).map(|k| 0.2 + 0.05 * k as f64).collect();
    let mut j = [0.0; JAW_DOF];
    j[0] = 0.03;
    j[4] = 0.001;
    (b, JawParams(j))
}

pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
