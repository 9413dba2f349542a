//! Line-delimited JSON persistence shared by every pipeline artifact.
//!
//! Record types opt into strict schemas with `#[serde(deny_unknown_fields)]`
//! and required keys, so a file that drifts from the declared schema fails
//! loudly with the offending line number instead of being half-read.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum JsonlError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: schema violation: {message}")]
    SchemaViolation {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("serialization failed: {0}")]
    Serialize(#[from] serde_json::Error),
}

impl JsonlError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        JsonlError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Serialize one record as a single JSON line (no trailing newline).
pub fn to_line<T: Serialize>(record: &T) -> Result<String, JsonlError> {
    Ok(serde_json::to_string(record)?)
}

/// Write `records` to `path`, replacing any existing file.
///
/// The file is written to a sibling temp path and renamed into place so a
/// crash never leaves a truncated dataset behind.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), JsonlError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| JsonlError::io(parent, e))?;
        }
    }
    let tmp = tmp_path(path);
    {
        let file = File::create(&tmp).map_err(|e| JsonlError::io(&tmp, e))?;
        let mut out = BufWriter::new(file);
        for record in records {
            let line = to_line(record)?;
            out.write_all(line.as_bytes())
                .and_then(|_| out.write_all(b"\n"))
                .map_err(|e| JsonlError::io(&tmp, e))?;
        }
        out.flush().map_err(|e| JsonlError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| JsonlError::io(path, e))
}

/// Read every record of `path`. Blank lines are skipped.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JsonlError> {
    let file = File::open(path).map_err(|e| JsonlError::io(path, e))?;
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| JsonlError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_line(path, idx + 1, &line)?);
    }
    Ok(records)
}

pub(crate) fn parse_line<T: DeserializeOwned>(
    path: &Path,
    line_no: usize,
    line: &str,
) -> Result<T, JsonlError> {
    serde_json::from_str(line).map_err(|e| JsonlError::SchemaViolation {
        path: path.to_path_buf(),
        line: line_no,
        message: e.to_string(),
    })
}

/// Append-only writer used by journals. Each `append` is flushed before
/// returning.
pub struct JsonlAppender {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlAppender {
    pub fn open(path: &Path) -> Result<Self, JsonlError> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| JsonlError::io(parent, e))?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| JsonlError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn append<T: Serialize>(&mut self, record: &T) -> Result<(), JsonlError> {
        let line = to_line(record)?;
        let path = &self.path;
        self.out
            .write_all(line.as_bytes())
            .and_then(|_| self.out.write_all(b"\n"))
            .and_then(|_| self.out.flush())
            .map_err(|e| JsonlError::io(path, e))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}
