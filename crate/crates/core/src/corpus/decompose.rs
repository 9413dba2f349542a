use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{estimate_tokens, LearningNode, SectionNode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecomposeConfig {
    /// Nodes whose text estimates below this many tokens are dropped.
    pub min_node_tokens: u64,
    /// Heading titles (case-insensitive, leading section numbers ignored)
    /// whose sections are never emitted.
    pub stop_headings: Vec<String>,
}

impl Default for DecomposeConfig {
    fn default() -> Self {
        DecomposeConfig {
            min_node_tokens: 64,
            stop_headings: [
                "Introduction",
                "Overview",
                "Summary",
                "Preface",
                "References",
                "Bibliography",
                "Acknowledgments",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        }
    }
}

impl DecomposeConfig {
    fn is_stop_heading(&self, title: &str) -> bool {
        let bare = title
            .trim_start_matches(|c: char| c.is_ascii_digit() || c == '.')
            .trim()
            .to_lowercase();
        self.stop_headings
            .iter()
            .any(|s| s.trim().to_lowercase() == bare)
    }
}

/// Cut a section tree into learning nodes.
///
/// Leaves at depth >= 2 are the canonical nodes. A chapter (depth 1) with no
/// sub-structure is emitted as a single node instead. Sections with an empty
/// body, a stop-listed title, or fewer than `min_node_tokens` tokens are
/// skipped. Output follows document order.
pub fn decompose_to_nodes(
    root: &SectionNode,
    doc_id: &str,
    cfg: &DecomposeConfig,
) -> Vec<LearningNode> {
    let mut nodes = Vec::new();
    for section in root.walk() {
        if section.depth == 0 || !section.is_leaf() {
            continue;
        }
        if section.body.trim().is_empty() {
            continue;
        }
        if section.title().is_some_and(|t| cfg.is_stop_heading(t)) {
            continue;
        }
        let text = format!(
            "{}\n\n{}",
            section.heading_path.join(" > "),
            section.body.trim()
        );
        let token_estimate = estimate_tokens(&text);
        if token_estimate < cfg.min_node_tokens {
            continue;
        }
        nodes.push(LearningNode {
            node_id: node_id(doc_id, &section.heading_path, &text),
            doc_id: doc_id.to_string(),
            heading_path: section.heading_path.clone(),
            text,
            token_estimate,
        });
    }
    nodes
}

/// Hex SHA-256 over `doc_id`, the heading path and the text, with unit and
/// record separators so distinct tuples never collide by concatenation.
pub fn node_id(doc_id: &str, heading_path: &[String], text: &str) -> String {
    let mut h = Sha256::new();
    h.update(doc_id.as_bytes());
    h.update([0x1f]);
    for (i, title) in heading_path.iter().enumerate() {
        if i > 0 {
            h.update([0x1e]);
        }
        h.update(title.as_bytes());
    }
    h.update([0x1f]);
    h.update(text.as_bytes());
    hex::encode(h.finalize())
}
