use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

pub const MANIFEST: &str = "manifest.json";
const LOCK: &str = "manifest.lock";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Done,
    /// Ran with its toggle off: the artifact is a pass-through of the input.
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub status: StageStatus,
    pub inputs: Vec<String>,
    /// Output path (relative to the run directory) → SHA-256 of its bytes.
    pub outputs: BTreeMap<String, String>,
}

/// What ran in a run directory and with which configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_digest: String,
    pub seed: u64,
    /// Every resolved config key, defaults included.
    pub config: BTreeMap<String, Value>,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_digest: cfg.digest(),
            seed: cfg.seed,
            config: cfg.to_flat(),
            stages: BTreeMap::new(),
        }
    }

    pub fn load(dir: &Path) -> Result<Option<Self>, CliError> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path)?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| CliError::Format(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, dir: &Path) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(dir.join(MANIFEST), text)?;
        Ok(())
    }

    /// Rebuilds the config recorded in the manifest.
    pub fn config(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::default();
        for (k, v) in &self.config {
            cfg.set(k, &v.to_string())?;
        }
        Ok(cfg)
    }

    pub fn record(
        &mut self,
        dir: &Path,
        stage: &str,
        status: StageStatus,
        inputs: &[&str],
        outputs: &[String],
    ) -> Result<(), CliError> {
        let mut digests = BTreeMap::new();
        for o in outputs {
            digests.insert(o.clone(), file_digest(&dir.join(o))?);
        }
        let inputs = inputs.iter().map(|s| s.to_string()).collect();
        self.stages.insert(
            stage.to_string(),
            StageRecord {
                status,
                inputs,
                outputs: digests,
            },
        );
        Ok(())
    }
}

pub fn file_digest(path: &Path) -> Result<String, CliError> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Exclusive writer lock on a run directory, released on drop.
pub struct DirLock {
    path: PathBuf,
    _file: File,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(f) => Ok(Self { path, _file: f }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(CliError::Locked(dir.to_path_buf()))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
