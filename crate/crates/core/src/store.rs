//! Manifest + raw blob storage for named f32 tensors.
//!
//! A store is two files: a UTF-8 JSON manifest (`*.json`) and a companion
//! blob (same stem, `.bin`) holding little-endian 32-bit floats, tensor after
//! tensor in manifest order. Checkpoints use format `bmace-ckpt-1` and
//! feature caches use `bmace-feat-1`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    /// File name of the blob, relative to the manifest.
    pub blob: String,
    pub total_bytes: u64,
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `tensors` (converted to f32) and their manifest.
pub fn write_store<T: Real>(
    manifest_path: &Path,
    format: &str,
    metadata: serde_json::Value,
    tensors: &[(String, &Tensor<T>)],
) -> Result<Manifest> {
    let blob = blob_path(manifest_path);
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset: bytes.len() as u64,
        });
        for v in t.data() {
            bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: format.to_string(),
        blob: blob
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        total_bytes: bytes.len() as u64,
        metadata,
        tensors: entries,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(dir) = manifest_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(manifest_path, text + "\n").map_err(|e| Error::io(manifest_path, e))?;
    fs::write(&blob, bytes).map_err(|e| Error::io(&blob, e))?;
    Ok(manifest)
}

/// Reads a store, checking the format tag and every byte length.
pub fn read_store(
    manifest_path: &Path,
    expected_format: &str,
) -> Result<(Manifest, Vec<(String, Tensor<f32>)>)> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    if manifest.format != expected_format {
        return Err(Error::Checkpoint(format!(
            "format {:?}, expected {:?}",
            manifest.format, expected_format
        )));
    }
    let blob = manifest_path.with_file_name(&manifest.blob);
    let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    if bytes.len() as u64 != manifest.total_bytes {
        return Err(Error::Checkpoint(format!(
            "blob is {} bytes, manifest declares {}",
            bytes.len(),
            manifest.total_bytes
        )));
    }
    let mut expected_offset = 0u64;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        if entry.dtype != "f32" {
            return Err(Error::Checkpoint(format!("{}: dtype {}", entry.name, entry.dtype)));
        }
        if entry.offset != expected_offset {
            return Err(Error::Checkpoint(format!(
                "{}: offset {} but previous tensors end at {}",
                entry.name, entry.offset, expected_offset
            )));
        }
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + numel * 4;
        if end > bytes.len() {
            return Err(Error::Checkpoint(format!("{}: runs past end of blob", entry.name)));
        }
        let data = bytes[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
        expected_offset = end as u64;
    }
    if expected_offset != manifest.total_bytes {
        return Err(Error::Checkpoint(format!(
            "tensors cover {expected_offset} bytes, manifest declares {}",
            manifest.total_bytes
        )));
    }
    Ok((manifest, tensors))
}
