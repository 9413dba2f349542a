//! Checkpoint format: one line of JSON header, then the parameters as raw
//! little-endian f64 values.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, Parameters};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: ModelConfig,
    pub param_count: usize,
}

fn err(path: &Path, message: impl Into<String>) -> ModelError {
    ModelError::Checkpoint {
        path: path.display().to_string(),
        message: message.into(),
    }
}

pub fn save_checkpoint(path: &Path, params: &Parameters) -> Result<(), ModelError> {
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        config: *params.config(),
        param_count: params.len(),
    };
    let mut bytes = serde_json::to_vec(&header).map_err(|e| err(path, e.to_string()))?;
    bytes.push(b'\n');
    bytes.reserve(params.len() * 8);
    for x in params.values() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| err(path, e.to_string()))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| err(path, e.to_string()))?;
    f.write_all(&bytes).map_err(|e| err(path, e.to_string()))
}

pub fn load_checkpoint(path: &Path) -> Result<Parameters, ModelError> {
    let bytes = fs::read(path).map_err(|e| err(path, e.to_string()))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| err(path, "missing header line"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| err(path, format!("bad header: {e}")))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(err(
            path,
            format!("unsupported format version {}", header.format_version),
        ));
    }
    let payload = &bytes[nl + 1..];
    if payload.len() != header.param_count * 8 {
        return Err(err(
            path,
            format!(
                "payload holds {} bytes, header promises {} parameters",
                payload.len(),
                header.param_count
            ),
        ));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Parameters::from_values(&header.config, values)
}
