//! Work-directory manifest: what each stage ran with, so stale downstream
//! artifacts can be spotted.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_FILE: &str = "granary_manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    /// Input file name → content hash at the time the stage ran.
    pub inputs: BTreeMap<String, String>,
    /// Output file name → content hash as written.
    pub outputs: BTreeMap<String, String>,
    pub completed_at: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkManifest {
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_json<T: Serialize>(value: &T) -> String {
    hash_bytes(serde_json::to_string(value).expect("config serializes").as_bytes())
}

pub fn hash_file(path: &Path) -> Option<String> {
    std::fs::read(path).ok().map(|b| hash_bytes(&b))
}

impl WorkManifest {
    pub fn load(workdir: &Path) -> Result<Self, CliError> {
        let path = workdir.join(MANIFEST_FILE);
        match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)
                .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(WorkManifest::default()),
            Err(e) => Err(CliError::Runtime(format!("{}: {e}", path.display()))),
        }
    }

    pub fn save(&self, workdir: &Path) -> Result<(), CliError> {
        let path = workdir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }

    pub fn record(
        &mut self,
        stage: &str,
        config_hash: String,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
    ) {
        let files = |paths: &[PathBuf]| {
            paths
                .iter()
                .map(|p| (p.display().to_string(), hash_file(p).unwrap_or_default()))
                .collect()
        };
        self.stages.insert(
            stage.to_string(),
            StageRecord {
                config_hash,
                inputs: files(inputs),
                outputs: files(outputs),
                completed_at: chrono::Utc::now().to_rfc3339(),
            },
        );
    }

    /// Reasons a recorded stage no longer matches the current config or
    /// files on disk; empty when it is up to date.
    pub fn staleness(&self, stage: &str, config_hash: &str) -> Option<Vec<String>> {
        let rec = self.stages.get(stage)?;
        let mut why = Vec::new();
        if rec.config_hash != config_hash {
            why.push("configuration changed".to_string());
        }
        for (path, hash) in &rec.inputs {
            if hash_file(Path::new(path)).as_deref() != Some(hash.as_str()) {
                why.push(format!("input {path} changed"));
            }
        }
        for (path, hash) in &rec.outputs {
            if hash_file(Path::new(path)).as_deref() != Some(hash.as_str()) {
                why.push(format!("output {path} modified or missing"));
            }
        }
        Some(why)
    }
}
