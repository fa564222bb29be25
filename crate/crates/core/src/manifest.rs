//! Run manifests: the inputs an artifact was produced from.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RunManifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub benchmark_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub benchmark_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend_config_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kb_snapshot_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts_snapshot_digest: Option<String>,
    /// Seconds since the Unix epoch; `SOURCE_DATE_EPOCH` wins when set.
    pub timestamp: u64,
}

impl RunManifest {
    pub fn now() -> Self {
        Self {
            timestamp: current_timestamp(),
            ..Self::default()
        }
    }

    /// Sidecar location for an artifact: `<artifact>.manifest.json`.
    pub fn sidecar_path(artifact: &Path) -> PathBuf {
        let mut name = artifact.as_os_str().to_owned();
        name.push(".manifest.json");
        PathBuf::from(name)
    }

    pub fn read_sidecar(artifact: &Path) -> Option<Self> {
        let text = fs::read_to_string(Self::sidecar_path(artifact)).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn write_sidecar(&self, artifact: &Path) -> std::io::Result<()> {
        fs::write(Self::sidecar_path(artifact), self.to_json_pretty())
    }

    pub fn to_json_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

pub fn current_timestamp() -> u64 {
    if let Some(epoch) = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.trim().parse().ok())
    {
        return epoch;
    }
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn file_digest(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}
