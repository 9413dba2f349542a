//! Append-only progress journal for resumable distillation runs.
//!
//! Two files: the journal proper (`{node_id, sample_idx, status,
//! timestamp}` per completed task) and an entry spool next to it holding the
//! full [`QtsaEntry`] records. The spool line is flushed before the journal
//! line, so a task counts as done only once both are on disk.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EntryStatus, QtsaEntry};
use crate::jsonl::{parse_line, JsonlAppender, JsonlError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JournalRecord {
    pub node_id: String,
    pub sample_idx: usize,
    pub status: String,
    pub timestamp: String,
}

pub fn spool_path(journal: &Path) -> PathBuf {
    let mut name = journal
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".entries");
    journal.with_file_name(name)
}

/// Reads a JSONL file, tolerating a torn final line (a crash mid-write).
/// A malformed line anywhere else is an error.
fn read_tolerant<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, JsonlError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => {
            return Err(JsonlError::Io {
                path: path.to_path_buf(),
                source: e,
            })
        }
    };
    let lines: Vec<&str> = text.split('\n').collect();
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(path, i + 1, line) {
            Ok(rec) => out.push(rec),
            Err(_) if i + 1 == lines.len() => {
                log::warn!("{}: ignoring torn final line", path.display());
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Completed entries keyed by (node_id, sample_idx).
pub type Completed = BTreeMap<(String, usize), QtsaEntry>;

pub struct Journal {
    journal: JsonlAppender,
    spool: JsonlAppender,
}

impl Journal {
    /// Opens (creating if needed) the journal and returns it with the entries
    /// of every task it already records as complete.
    pub fn open(path: &Path) -> Result<(Self, Completed), JsonlError> {
        let spool = spool_path(path);
        let records: Vec<JournalRecord> = read_tolerant(path)?;
        let entries: Vec<QtsaEntry> = read_tolerant(&spool)?;
        let done: HashSet<(String, usize)> = records
            .into_iter()
            .map(|r| (r.node_id, r.sample_idx))
            .collect();
        let mut completed = BTreeMap::new();
        for e in entries {
            let key = (e.node_id.clone(), e.sample_idx);
            if done.contains(&key) {
                completed.insert(key, e);
            }
        }
        // A torn last line has no newline; terminate it so appends start clean.
        for p in [path, spool.as_path()] {
            if let Ok(bytes) = fs::read(p) {
                if bytes.last().is_some_and(|&b| b != b'\n') {
                    let mut fixed = bytes;
                    fixed.push(b'\n');
                    fs::write(p, fixed).map_err(|source| JsonlError::Io {
                        path: p.to_path_buf(),
                        source,
                    })?;
                }
            }
        }
        Ok((
            Journal {
                journal: JsonlAppender::open(path)?,
                spool: JsonlAppender::open(&spool)?,
            },
            completed,
        ))
    }

    pub fn record(&mut self, entry: &QtsaEntry) -> Result<(), JsonlError> {
        self.spool.append(entry)?;
        let status = match entry.status {
            EntryStatus::Kept => "kept",
            EntryStatus::Rejected(_) => "rejected",
        };
        self.journal.append(&JournalRecord {
            node_id: entry.node_id.clone(),
            sample_idx: entry.sample_idx,
            status: status.into(),
            timestamp: chrono::Utc::now().to_rfc3339(),
        })
    }
}
