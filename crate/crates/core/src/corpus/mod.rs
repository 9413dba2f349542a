//! Corpus ingestion: cleaned Markdown books to learning nodes.
//!
//! A book is parsed into a [`SectionNode`] tree from its ATX headings, then
//! the leaves of the tree are cut into [`LearningNode`]s, the indivisible
//! units that the distiller samples questions from.

mod decompose;
mod loader;
mod markdown;

use serde::{Deserialize, Serialize};

pub use decompose::{decompose_to_nodes, DecomposeConfig};
pub use loader::{load_corpus, ManifestEntry};
pub use markdown::{parse_markdown_bytes, parse_markdown_str, parse_markdown_tree, SectionNode};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("document is not valid UTF-8 (first bad byte at offset {valid_up_to})")]
    InvalidEncoding { valid_up_to: usize },
    #[error("document {0} has an empty body")]
    EmptyDocument(String),
    #[error("doc_id {0:?} appears more than once in the manifest")]
    DuplicateDocId(String),
    #[error("manifest lists {0:?} but the file does not exist")]
    MissingFile(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path}: {message}")]
    Manifest { path: String, message: String },
}

/// Curriculum stage a book belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearningStage {
    CircuitTheory,
    AnalogBasis,
    AnalogIc,
    Advanced,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceDocument {
    pub doc_id: String,
    pub title: String,
    pub learning_stage: LearningStage,
    pub markdown: String,
    pub source_path: String,
}

impl SourceDocument {
    /// Builds a document from raw file bytes, rejecting non-UTF-8 and empty
    /// input.
    pub fn from_bytes(
        doc_id: impl Into<String>,
        title: impl Into<String>,
        learning_stage: LearningStage,
        bytes: &[u8],
        source_path: impl Into<String>,
    ) -> Result<Self, CorpusError> {
        let doc_id = doc_id.into();
        let markdown = std::str::from_utf8(bytes)
            .map_err(|e| CorpusError::InvalidEncoding {
                valid_up_to: e.valid_up_to(),
            })?
            .to_string();
        if markdown.trim().is_empty() {
            return Err(CorpusError::EmptyDocument(doc_id));
        }
        Ok(SourceDocument {
            doc_id,
            title: title.into(),
            learning_stage,
            markdown,
            source_path: source_path.into(),
        })
    }
}

/// One line of `nodes.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningNode {
    pub node_id: String,
    pub doc_id: String,
    pub heading_path: Vec<String>,
    pub text: String,
    pub token_estimate: u64,
}

/// Rough token count: one token per four UTF-8 bytes, rounded up.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.len() as u64).div_ceil(4)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub node_count: u64,
    pub total_tokens: u64,
    pub mean_tokens: f64,
}

/// Parse and decompose every document, in document order. Documents are
/// independent, so they are processed in parallel.
pub fn ingest(docs: &[SourceDocument], cfg: &DecomposeConfig) -> Vec<LearningNode> {
    use rayon::prelude::*;
    docs.par_iter()
        .map(|doc| decompose_to_nodes(&parse_markdown_tree(doc), &doc.doc_id, cfg))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

pub fn corpus_stats(nodes: &[LearningNode]) -> CorpusStats {
    let node_count = nodes.len() as u64;
    let total_tokens: u64 = nodes.iter().map(|n| n.token_estimate).sum();
    let mean_tokens = if node_count == 0 {
        0.0
    } else {
        total_tokens as f64 / node_count as f64
    };
    CorpusStats {
        node_count,
        total_tokens,
        mean_tokens,
    }
}
