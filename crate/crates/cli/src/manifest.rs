//! Run manifest: resolved config, input hash, artifact list and timings.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Version string folded into every input hash.
pub const CODE_VERSION: &str = concat!("hedge-lab ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory.
    pub path: String,
    /// Size and hash are omitted for files that contain wall-clock timings.
    pub bytes: Option<u64>,
    pub sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub code_version: String,
    pub command: String,
    pub config: ExperimentConfig,
    /// SHA-256 over code version, command, config (minus `out`) and the
    /// contents of every input file.
    pub input_hash: String,
    pub inputs: Vec<InputFile>,
    pub artifacts: Vec<Artifact>,
    pub summary: serde_json::Value,
    pub timings: Timings,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of everything that determines a run's outputs.
pub fn input_hash(
    command: &str,
    config: &ExperimentConfig,
    inputs: &[(PathBuf, Vec<u8>)],
    code_version: &str,
) -> Result<String> {
    let mut value = serde_json::to_value(config)?;
    if let Some(map) = value.as_object_mut() {
        map.remove("out");
    }
    let mut h = Sha256::new();
    for part in [
        code_version.as_bytes(),
        command.as_bytes(),
        value.to_string().as_bytes(),
    ] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    for (_, bytes) in inputs {
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    }
    Ok(hex::encode(h.finalize()))
}

/// Collects artifacts as a command writes them.
#[derive(Debug)]
pub struct ArtifactSet {
    root: PathBuf,
    items: Vec<Artifact>,
}

impl ArtifactSet {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            items: Vec::new(),
        }
    }

    /// Writes `bytes` to `root/rel` (temp file, then rename) and records it.
    pub fn write(&mut self, rel: &str, bytes: &[u8], has_timing: bool) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        write_atomic(&path, bytes)?;
        self.record(rel, bytes, has_timing);
        Ok(path)
    }

    fn record(&mut self, rel: &str, bytes: &[u8], has_timing: bool) {
        self.items.push(Artifact {
            path: rel.to_string(),
            bytes: (!has_timing).then_some(bytes.len() as u64),
            sha256: (!has_timing).then(|| sha256_hex(bytes)),
        });
    }

    pub fn into_items(self) -> Vec<Artifact> {
        self.items
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        Ok(serde_json::from_str(&text)?)
    }
}
