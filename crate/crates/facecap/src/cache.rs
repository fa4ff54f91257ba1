//! Precomputed muscle-basis cache stored next to an asset.

use std::path::{Path, PathBuf};

use facecap_core::anatomy::{from_displacements, PrecomputedMuscleBasis};
use facecap_core::assets::Asset;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formats::{read_json, to_v3s, to_vec3s, write_json, FormatError, V3};

pub const CACHE_FILE: &str = "basis.json";
pub const CACHE_FORMAT: &str = "facecap-basis/1";

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("no basis cache at {0}; run `facecap precompute --asset <dir>` first")]
    Missing(PathBuf),
    #[error("basis cache {path} was built for a different asset; rerun `facecap precompute`")]
    Stale { path: PathBuf },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("basis cache does not match the asset: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisFile {
    pub format: String,
    pub asset_hash: String,
    pub shape_names: Vec<String>,
    /// Volumetric jaw weight per flesh vertex.
    pub flesh_weights: Vec<f64>,
    /// One harmonic displacement field per blendshape.
    pub flesh_displacements: Vec<Vec<V3>>,
}

pub fn cache_path(asset_dir: &Path) -> PathBuf {
    asset_dir.join(CACHE_FILE)
}

pub fn write_cache(
    asset_dir: &Path,
    asset_hash: &str,
    basis: &PrecomputedMuscleBasis,
) -> Result<PathBuf, CacheError> {
    let path = cache_path(asset_dir);
    let file = BasisFile {
        format: CACHE_FORMAT.to_string(),
        asset_hash: asset_hash.to_string(),
        shape_names: basis.shape_names.clone(),
        flesh_weights: basis.flesh_weights.clone(),
        flesh_displacements: basis
            .flesh_displacements
            .iter()
            .map(|d| to_v3s(d))
            .collect(),
    };
    write_json(&path, &file)?;
    Ok(path)
}

/// Loads the cache and checks it against the asset it claims to belong to.
pub fn read_cache(
    asset_dir: &Path,
    asset: &Asset,
    asset_hash: &str,
) -> Result<PrecomputedMuscleBasis, CacheError> {
    let path = cache_path(asset_dir);
    if !path.is_file() {
        return Err(CacheError::Missing(path));
    }
    let file: BasisFile = read_json(&path)?;
    if file.format != CACHE_FORMAT || file.asset_hash != asset_hash {
        return Err(CacheError::Stale { path });
    }
    let nv = asset.flesh.num_vertices();
    if file.flesh_weights.len() != nv
        || file.flesh_displacements.len() != asset.rig.num_shapes()
        || file.flesh_displacements.iter().any(|d| d.len() != nv)
    {
        return Err(CacheError::Mismatch("field sizes".into()));
    }
    let displacements = file
        .flesh_displacements
        .iter()
        .map(|d| to_vec3s(d))
        .collect();
    from_displacements(
        &asset.flesh,
        &asset.rig,
        &asset.muscles,
        file.flesh_weights,
        displacements,
    )
    .map_err(|e| CacheError::Mismatch(e.to_string()))
}
