use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::store::{read_store, write_store};

pub const CHECKPOINT_FORMAT: &str = "bmace-ckpt-1";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    #[serde(default)]
    extra: serde_json::Value,
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams<f32>,
    /// Free-form metadata stored next to the config (normalization stats,
    /// vocabulary, training provenance).
    pub extra: serde_json::Value,
}

/// Writes `<path>` (manifest) and `<path>.bin` (little-endian f32 blob).
pub fn save_checkpoint<T: crate::numerics::Real>(
    path: &Path,
    config: &ModelConfig,
    params: &ModelParams<T>,
    extra: serde_json::Value,
) -> Result<()> {
    let meta = CheckpointMeta {
        config: *config,
        extra,
    };
    let meta = serde_json::to_value(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    write_store(path, CHECKPOINT_FORMAT, meta, &params.named())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (manifest, tensors) = read_store(path, CHECKPOINT_FORMAT)?;
    let meta: CheckpointMeta = serde_json::from_value(manifest.metadata)
        .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    meta.config.validate()?;
    let expected: Vec<String> = super::init_names(&meta.config);
    let names: Vec<&String> = tensors.iter().map(|(n, _)| n).collect();
    if names.len() != expected.len() || names.iter().zip(&expected).any(|(a, b)| *a != b) {
        return Err(Error::Checkpoint("tensor names do not match the config".into()));
    }
    let params = ModelParams::from_tensors(&meta.config, tensors.into_iter().map(|(_, t)| t).collect())?;
    Ok(Checkpoint {
        config: meta.config,
        params,
        extra: meta.extra,
    })
}
