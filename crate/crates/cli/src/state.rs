//! On-disk layout under the state root and the run manifests that index it.
//!
//! ```text
//! $KDGAN_STATE/
//!   datasets/<name>/     split files, preview.png, manifest.json
//!   runs/<run_id>/       {role}_{epoch}.ckpt, trace.jsonl, metrics.log, manifest.json
//!   reports/<name>/      grid.png, tables.txt, manifest.json
//!   segmenters/          reference segmenters keyed by dataset spec hash
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use kdgan::config::ExperimentConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Refusal;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug)]
pub struct State {
    root: PathBuf,
}

impl State {
    pub fn new(root: PathBuf) -> Self {
        Self { root }
    }

    pub fn dataset_dir(&self, name: &str) -> PathBuf {
        self.root.join("datasets").join(name)
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join("runs").join(run_id)
    }

    pub fn report_dir(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    pub fn segmenter_dir(&self) -> PathBuf {
        self.root.join("segmenters")
    }
}

/// Prepares an output directory: refuses when it already holds anything
/// unless `force` is set, in which case the old contents are removed.
pub fn claim(dir: &Path, what: &str, force: bool) -> Result<()> {
    let occupied = fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied {
        if !force {
            return Err(Refusal(format!("{what} {} already exists; pass --force to replace it", dir.display())).into());
        }
        fs::remove_dir_all(dir).with_context(|| format!("removing {}", dir.display()))?;
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

/// Hash of a file's bytes framed like a git blob (`blob <len>\0<bytes>`), with SHA-256.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Path relative to the manifest's directory.
    pub path: String,
    pub hash: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub kind: String,
    pub command: Vec<String>,
    #[serde(default)]
    pub config: Option<ExperimentConfig>,
    #[serde(default)]
    pub config_hash: Option<String>,
    #[serde(default)]
    pub dataset: Option<String>,
    /// Hash of the dataset spec, as carried by metric records.
    #[serde(default)]
    pub dataset_hash: Option<String>,
    /// Hash of the generated dataset bytes.
    #[serde(default)]
    pub dataset_content_hash: Option<String>,
    /// Run ids this run was built from, e.g. the teacher of a distillation run.
    #[serde(default)]
    pub inputs: Vec<String>,
    pub artifacts: Vec<Artifact>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

impl RunManifest {
    pub fn new(run_id: &str, kind: &str) -> Self {
        Self {
            run_id: run_id.to_string(),
            kind: kind.to_string(),
            command: std::env::args().collect(),
            config: None,
            config_hash: None,
            dataset: None,
            dataset_hash: None,
            dataset_content_hash: None,
            inputs: Vec::new(),
            artifacts: Vec::new(),
            started_unix: unix_now(),
            finished_unix: 0,
        }
    }

    pub fn with_config(mut self, cfg: &ExperimentConfig) -> Self {
        self.config_hash = Some(cfg.hash());
        self.config = Some(cfg.clone());
        self
    }

    /// Records every regular file in `dir` except the manifest itself and
    /// writes the manifest.
    pub fn finish(mut self, dir: &Path) -> Result<Self> {
        let mut artifacts = Vec::new();
        let mut names: Vec<String> = fs::read_dir(dir)?
            .flatten()
            .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n != MANIFEST)
            .collect();
        names.sort();
        for name in names {
            let bytes = fs::read(dir.join(&name))?;
            artifacts.push(Artifact {
                hash: content_hash(&bytes),
                bytes: bytes.len() as u64,
                path: name,
            });
        }
        self.artifacts = artifacts;
        self.finished_unix = unix_now();
        fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&self)?)?;
        Ok(self)
    }

    pub fn read(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Ok(None);
        }
        let bytes = fs::read(&path)?;
        Ok(Some(
            serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))?,
        ))
    }

    /// Reads the manifest of `dir` and checks every artifact against its hash.
    pub fn load_verified(dir: &Path, what: &str) -> Result<Self> {
        let manifest = Self::read(dir)?.ok_or_else(|| kdgan::Error::Load {
            path: dir.join(MANIFEST),
            reason: format!("{what} has no manifest; it was never completed"),
        })?;
        manifest.verify(dir)?;
        Ok(manifest)
    }

    pub fn verify(&self, dir: &Path) -> Result<()> {
        for a in &self.artifacts {
            let path = dir.join(&a.path);
            let bytes = fs::read(&path).map_err(|e| kdgan::Error::Load {
                path: path.clone(),
                reason: format!("listed in the manifest but unreadable: {e}"),
            })?;
            if content_hash(&bytes) != a.hash {
                return Err(kdgan::Error::Load {
                    path,
                    reason: "content differs from the hash recorded in the manifest".into(),
                }
                .into());
            }
        }
        Ok(())
    }
}
