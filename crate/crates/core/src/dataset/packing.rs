//! Greedy in-order packing of tokenized examples into fixed-budget rows.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DatasetError, TokenizedExample};
use crate::tinylm::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub offset: usize,
    pub length: usize,
}

/// Several examples laid end to end. Each segment is an independent
/// sequence: positions restart and nothing attends across boundaries.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PackedSequence {
    pub ids: Vec<TokenId>,
    pub mask: Vec<bool>,
    pub segments: Vec<Segment>,
}

impl PackedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn segment_ids(&self, i: usize) -> &[TokenId] {
        let s = self.segments[i];
        &self.ids[s.offset..s.offset + s.length]
    }

    pub fn segment_mask(&self, i: usize) -> &[bool] {
        let s = self.segments[i];
        &self.mask[s.offset..s.offset + s.length]
    }

    pub fn segment(&self, i: usize) -> TokenizedExample {
        TokenizedExample {
            input_ids: self.segment_ids(i).to_vec(),
            loss_mask: self.segment_mask(i).to_vec(),
        }
    }

    fn push(&mut self, ex: &TokenizedExample) {
        self.segments.push(Segment {
            offset: self.ids.len(),
            length: ex.len(),
        });
        self.ids.extend_from_slice(&ex.input_ids);
        self.mask.extend_from_slice(&ex.loss_mask);
    }
}

/// Append each example to the open pack if it fits, otherwise close the pack
/// and start a new one. Input order is preserved within and across packs.
pub fn pack_sequences(examples: &[TokenizedExample], max_len: usize) -> Result<Vec<PackedSequence>, DatasetError> {
    let mut packs = Vec::new();
    let mut current = PackedSequence::default();
    for (i, ex) in examples.iter().enumerate() {
        if ex.len() > max_len {
            return Err(DatasetError::OversizedExample {
                id: format!("#{i}"),
                len: ex.len(),
                max_len,
            });
        }
        if current.len() + ex.len() > max_len {
            packs.push(std::mem::take(&mut current));
        }
        current.push(ex);
    }
    if !current.segments.is_empty() {
        packs.push(current);
    }
    Ok(packs)
}

pub const PACKED_FORMAT_VERSION: u32 = 1;

/// JSON sidecar of `packed.bin`.
///
/// The binary file holds, for each pack in order, its token ids as `u32`
/// little-endian followed by one mask byte (0/1) per token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackedSidecar {
    pub format_version: u32,
    pub max_len: usize,
    pub packs: Vec<PackEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackEntry {
    pub byte_offset: u64,
    pub length: usize,
    pub segments: Vec<Segment>,
}

fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

pub fn write_packed(bin: &Path, packs: &[PackedSequence], max_len: usize) -> Result<(), DatasetError> {
    let err = |p: &Path, e: std::io::Error| DatasetError::Packed {
        path: p.display().to_string(),
        message: e.to_string(),
    };
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(packs.len());
    for p in packs {
        entries.push(PackEntry {
            byte_offset: bytes.len() as u64,
            length: p.len(),
            segments: p.segments.clone(),
        });
        for id in &p.ids {
            bytes.extend_from_slice(&id.to_le_bytes());
        }
        bytes.extend(p.mask.iter().map(|&m| m as u8));
    }
    let mut f = fs::File::create(bin).map_err(|e| err(bin, e))?;
    f.write_all(&bytes).map_err(|e| err(bin, e))?;
    let sidecar = PackedSidecar {
        format_version: PACKED_FORMAT_VERSION,
        max_len,
        packs: entries,
    };
    let side = sidecar_path(bin);
    let json = serde_json::to_string_pretty(&sidecar).map_err(|e| DatasetError::Packed {
        path: side.display().to_string(),
        message: e.to_string(),
    })?;
    fs::write(&side, json).map_err(|e| err(&side, e))
}

pub fn read_packed(bin: &Path) -> Result<(PackedSidecar, Vec<PackedSequence>), DatasetError> {
    let bad = |p: &Path, message: String| DatasetError::Packed {
        path: p.display().to_string(),
        message,
    };
    let side = sidecar_path(bin);
    let text = fs::read_to_string(&side).map_err(|e| bad(&side, e.to_string()))?;
    let sidecar: PackedSidecar = serde_json::from_str(&text).map_err(|e| bad(&side, e.to_string()))?;
    if sidecar.format_version != PACKED_FORMAT_VERSION {
        return Err(bad(&side, format!("unsupported format_version {}", sidecar.format_version)));
    }
    let bytes = fs::read(bin).map_err(|e| bad(bin, e.to_string()))?;
    let mut packs = Vec::with_capacity(sidecar.packs.len());
    for entry in &sidecar.packs {
        let start = entry.byte_offset as usize;
        let end = start + entry.length * 5;
        if end > bytes.len() {
            return Err(bad(bin, format!("pack at byte {start} runs past end of file")));
        }
        let (id_bytes, mask_bytes) = bytes[start..end].split_at(entry.length * 4);
        let ids = id_bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let mask = mask_bytes.iter().map(|&b| b != 0).collect();
        packs.push(PackedSequence {
            ids,
            mask,
            segments: entry.segments.clone(),
        });
    }
    Ok((sidecar, packs))
}
