//! Asset + basis bundles and deformer helpers shared by the CLI and tests.

use std::path::{Path, PathBuf};

use facecap_core::anatomy::{Anatomy, PrecomputedMuscleBasis};
use facecap_core::assets::Asset;
use facecap_core::capture::{
    volume_change, CaptureError, DoglegReport, EmbeddedVolume, VolumeChange,
};
use facecap_core::geometry::Vec3;
use facecap_core::quasistatic::{constrained_positions, EquilibriumState};
use facecap_core::rig::JawParams;
use serde::{Deserialize, Serialize};

use crate::cache::{read_cache, CacheError};
use crate::formats::{asset_hash, read_asset, FormatError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DeformerKind {
    Blendshape,
    Simulation,
}

/// A loaded asset with its anatomy and precomputed basis.
pub struct Session {
    pub dir: Option<PathBuf>,
    pub hash: String,
    pub asset: Asset,
    pub anatomy: Anatomy,
    pub basis: PrecomputedMuscleBasis,
}

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error("{0}")]
    Asset(String),
}

impl Session {
    /// Reads an asset directory and its basis cache.
    pub fn load(dir: &Path) -> Result<Self, SessionError> {
        let asset = read_asset(dir)?;
        let hash = asset_hash(dir)?;
        let basis = read_cache(dir, &asset, &hash)?;
        Ok(Self {
            dir: Some(dir.to_path_buf()),
            hash,
            anatomy: asset.anatomy(),
            asset,
            basis,
        })
    }

    /// Builds the basis in memory.
    pub fn from_asset(asset: Asset) -> Result<Self, SessionError> {
        let basis = asset
            .precompute()
            .map_err(|e| SessionError::Asset(e.to_string()))?;
        Ok(Self {
            dir: None,
            hash: String::from("in-memory"),
            anatomy: asset.anatomy(),
            asset,
            basis,
        })
    }

    pub fn num_shapes(&self) -> usize {
        self.asset.rig.num_shapes()
    }

    /// Flesh positions of the kinematic vertices at jaw pose `j`, scattered
    /// into a full-size vertex array (others at rest).
    pub fn kinematic_positions(&self, j: &JawParams) -> Vec<Vec3> {
        let mut full = self.asset.flesh.vertices().to_vec();
        let cp = constrained_positions(&self.anatomy, &self.basis, j);
        for (&c, p) in self.anatomy.constrained.iter().zip(cp) {
            full[c] = p;
        }
        full
    }

    /// Relative flesh volume change implied by a pure blendshape surface.
    pub fn blendshape_volume(
        &self,
        surface: &[Vec3],
        j: &JawParams,
    ) -> Result<VolumeChange, CaptureError> {
        let a = &self.asset;
        let ev = EmbeddedVolume::new(&a.flesh, &a.surface_to_flesh, &a.constrained)?;
        let positions = ev.positions(&a.flesh, surface, &self.kinematic_positions(j))?;
        Ok(volume_change(&a.flesh, &positions, &a.lip_region))
    }

    pub fn simulation_volume(&self, state: &EquilibriumState) -> VolumeChange {
        volume_change(&self.asset.flesh, &state.positions, &self.asset.lip_region)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub accepted_costs: Vec<f64>,
    pub termination: String,
    pub monotone: bool,
    pub cauchy_fallbacks: usize,
    pub failed_evaluations: usize,
}

impl From<&DoglegReport> for ReportFile {
    fn from(r: &DoglegReport) -> Self {
        Self {
            iterations: r.iterations,
            initial_cost: r.initial_cost,
            final_cost: r.final_cost,
            accepted_costs: r.accepted_costs.clone(),
            termination: format!("{:?}", r.termination),
            monotone: r.is_monotone(),
            cauchy_fallbacks: r.cauchy_fallbacks,
            failed_evaluations: r.failed_evaluations,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeFile {
    pub total: f64,
    pub region: f64,
}

impl From<VolumeChange> for VolumeFile {
    fn from(v: VolumeChange) -> Self {
        Self {
            total: v.total,
            region: v.region,
        }
    }
}
