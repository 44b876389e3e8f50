//! Run manifests: a small JSON record of what produced an output, written
//! before any work begins.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_fingerprint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_hash: Option<String>,
    pub created_unix_ms: u128,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        RunManifest {
            command: command.to_string(),
            config,
            seed: None,
            model_fingerprint: None,
            data_hash: None,
            created_unix_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis())
                .unwrap_or(0),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_fingerprint(mut self, fp: &[u8; 32]) -> Self {
        self.model_fingerprint = Some(hex::encode(fp));
        self
    }

    pub fn with_data_file(mut self, path: &Path) -> anyhow::Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut h = Sha256::new();
        h.update(&bytes);
        self.data_hash = Some(hex::encode(h.finalize()));
        Ok(self)
    }

    /// Write into `dir/manifest.json` (directory outputs).
    pub fn write_into_dir(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// Write next to a file output as `<file>.manifest.json`.
    pub fn write_beside(&self, file: &Path) -> anyhow::Result<()> {
        if let Some(parent) = file.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let path = beside_path(file);
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

pub fn beside_path(file: &Path) -> PathBuf {
    let mut s = file.as_os_str().to_os_string();
    s.push(".manifest.json");
    PathBuf::from(s)
}
