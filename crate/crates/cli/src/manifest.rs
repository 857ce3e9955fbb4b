//! Per-command record of inputs and outputs, written as `run_manifest.json`.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, Utc};
use fieldsam_data::eras::{ids_hash, sha256_file};
use fieldsam_data::SplitScheme;
use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitHashes {
    pub scheme: String,
    pub n_train: usize,
    pub n_val: usize,
    /// Hash of the newline-joined training tile ids, in dataset order.
    pub train_ids_sha256: String,
    pub val_ids_sha256: String,
}

impl SplitHashes {
    pub fn new(scheme: &SplitScheme, train: &[String], val: &[String]) -> Self {
        Self {
            scheme: scheme.to_string(),
            n_train: train.len(),
            n_val: val.len(),
            train_ids_sha256: ids_hash(train),
            val_ids_sha256: ids_hash(val),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub git_describe: String,
    pub split: Option<SplitHashes>,
    pub trainable_params: Option<usize>,
    /// Command-specific results such as losses or counts.
    pub results: serde_json::Value,
    /// SHA-256 of every artifact, keyed by path relative to the output directory.
    pub artifacts: BTreeMap<String, String>,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
}

impl RunManifest {
    pub fn start(command: &str, config: serde_json::Value, seed: u64) -> Self {
        let now = Utc::now();
        Self {
            command: command.to_string(),
            config,
            seed,
            git_describe: git_describe(),
            split: None,
            trainable_params: None,
            results: serde_json::Value::Null,
            artifacts: BTreeMap::new(),
            started_at: now,
            finished_at: now,
        }
    }

    /// Hashes the given files under `dir`, stamps the finish time and writes
    /// the manifest into `dir`.
    pub fn finish(mut self, dir: &Path, artifacts: &[String]) -> Result<Self> {
        for rel in artifacts {
            self.artifacts.insert(rel.clone(), sha256_file(dir.join(rel))?);
        }
        self.finished_at = Utc::now();
        std::fs::create_dir_all(dir)?;
        let f = std::fs::File::create(dir.join(MANIFEST_FILE))?;
        serde_json::to_writer_pretty(f, &self)?;
        Ok(self)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// `git describe --always --dirty` of the working directory, or `"unknown"`.
pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .stderr(std::process::Stdio::null())
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}
