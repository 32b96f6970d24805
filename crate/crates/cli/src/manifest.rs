use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use crate::Command;

pub const MANIFEST_NAME: &str = "run_manifest.json";

/// Everything needed to reproduce one run.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    /// Parsed arguments with every default filled in; `bmace replay` feeds
    /// them back in.
    pub args: Command,
    /// Library-level configuration the arguments resolved to.
    pub resolved: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub threads: usize,
}

impl RunManifest {
    pub fn new(args: &Command, threads: usize) -> Self {
        RunManifest {
            tool: "bmace".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            args: args.clone(),
            resolved: serde_json::Value::Null,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            threads,
        }
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        write_json(path, self)
    }

    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }
}

/// Manifest path for a run whose primary output is the file `out`:
/// `feats.json` gets `feats.manifest.json`.
pub fn beside(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.manifest.json"))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
