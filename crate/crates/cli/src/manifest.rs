//! Run manifests: one JSON document per command invocation recording the
//! resolved configuration, seeds, input/output content hashes, and timing.

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub duration_ms: u128,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

/// Collects hashes and writes `<main_output>.manifest.json`.
pub struct ManifestBuilder {
    command: String,
    config: serde_json::Value,
    seeds: BTreeMap<String, u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            config: serde_json::Value::Null,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn config(&mut self, value: serde_json::Value) -> &mut Self {
        self.config = value;
        self
    }

    pub fn seed(&mut self, name: &str, value: u64) -> &mut Self {
        self.seeds.insert(name.to_string(), value);
        self
    }

    pub fn input(&mut self, path: &Path) -> &mut Self {
        self.inputs.push(path.to_path_buf());
        self
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.outputs.push(path.to_path_buf());
        self
    }

    /// Hashes all recorded files and writes the manifest next to the first
    /// output.
    pub fn write(&self) -> Result<PathBuf> {
        let hash_all = |paths: &[PathBuf]| -> Result<Vec<FileHash>> {
            paths
                .iter()
                .map(|p| {
                    Ok(FileHash { path: p.display().to_string(), sha256: sha256_file(p)? })
                })
                .collect()
        };
        let manifest = RunManifest {
            command: self.command.clone(),
            config: self.config.clone(),
            seeds: self.seeds.clone(),
            inputs: hash_all(&self.inputs)?,
            outputs: hash_all(&self.outputs)?,
            duration_ms: self.started.elapsed().as_millis(),
        };
        let main_output = self.outputs.first().context("manifest needs at least one output")?;
        let path = PathBuf::from(format!("{}.manifest.json", main_output.display()));
        std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
        Ok(path)
    }
}

/// Re-hashes every file named by a manifest; `Ok(true)` when all match.
pub fn verify(manifest_path: &Path) -> Result<bool> {
    let manifest: RunManifest = serde_json::from_slice(&std::fs::read(manifest_path)?)?;
    for fh in manifest.inputs.iter().chain(&manifest.outputs) {
        if sha256_file(Path::new(&fh.path))? != fh.sha256 {
            return Ok(false);
        }
    }
    Ok(true)
}
