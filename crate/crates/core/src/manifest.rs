//! Provenance record written into every output directory.

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

pub const RUN_MANIFEST: &str = "run.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub config: serde_json::Value,
    /// Content hash of the input (or, for `gen`, output) dataset.
    pub dataset_hash: Option<String>,
    pub version: String,
    /// Seconds since the Unix epoch.
    pub started_at: u64,
    pub finished_at: Option<u64>,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn begin(command: Vec<String>, config: serde_json::Value, dataset_hash: Option<String>) -> Self {
        Self {
            command,
            config,
            dataset_hash,
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: now(),
            finished_at: None,
        }
    }

    pub fn finish(&mut self) {
        self.finished_at = Some(now());
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        fs::write(dir.join(RUN_MANIFEST), json)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(dir.join(RUN_MANIFEST))?)?)
    }
}

/// SHA-256 over the names and bytes of the dataset files, in name order.
/// The run manifest itself is excluded so the hash depends only on data.
pub fn dataset_fingerprint(dir: &Path) -> Result<String> {
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n != RUN_MANIFEST)
        .collect();
    names.sort();
    let mut hasher = Sha256::new();
    for name in names {
        hasher.update(name.as_bytes());
        hasher.update([0]);
        hasher.update(fs::read(dir.join(&name))?);
    }
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_ignores_manifest_and_tracks_content() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.bin"), [1, 2, 3]).unwrap();
        let h = dataset_fingerprint(dir.path()).unwrap();
        RunManifest::begin(vec!["gen".into()], serde_json::Value::Null, None)
            .write(dir.path())
            .unwrap();
        assert_eq!(dataset_fingerprint(dir.path()).unwrap(), h);
        fs::write(dir.path().join("a.bin"), [1, 2, 4]).unwrap();
        assert_ne!(dataset_fingerprint(dir.path()).unwrap(), h);
    }
}
