//! ATX-heading section tree.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{CorpusError, SourceDocument};

/// One heading and the text that belongs to it up to the first child heading.
///
/// `heading_line` and `body` are kept verbatim (with their line terminators)
/// so [`SectionNode::to_markdown`] reproduces the source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionNode {
    pub heading_path: Vec<String>,
    pub depth: usize,
    /// Raw heading line including its newline; `None` for the root.
    pub heading_line: Option<String>,
    pub body: String,
    pub children: Vec<SectionNode>,
}

impl SectionNode {
    fn root() -> Self {
        SectionNode {
            heading_path: Vec::new(),
            depth: 0,
            heading_line: None,
            body: String::new(),
            children: Vec::new(),
        }
    }

    pub fn title(&self) -> Option<&str> {
        self.heading_path.last().map(String::as_str)
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    /// Pre-order traversal, which is document order.
    pub fn walk(&self) -> Vec<&SectionNode> {
        let mut out = Vec::new();
        let mut stack = vec![self];
        while let Some(node) = stack.pop() {
            out.push(node);
            stack.extend(node.children.iter().rev());
        }
        out
    }

    /// Re-serialize the tree. Equals the source markdown with `\r\n`
    /// normalized to `\n`.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        for node in self.walk() {
            if let Some(line) = &node.heading_line {
                out.push_str(line);
            }
            out.push_str(&node.body);
        }
        out
    }
}

fn heading_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        // up to 3 spaces of indent, 1-6 hashes, then either end of line or
        // whitespace + title; an optional closing run of hashes is dropped
        Regex::new(r"^ {0,3}(#{1,6})(?:[ \t]+(.*?))?(?:[ \t]+#+)?[ \t]*$").unwrap()
    })
}

fn fence_marker(line: &str) -> Option<&'static str> {
    let t = line.trim_start_matches(' ');
    if line.len() - t.len() > 3 {
        return None;
    }
    if t.starts_with("```") {
        Some("```")
    } else if t.starts_with("~~~") {
        Some("~~~")
    } else {
        None
    }
}

/// Returns `(level, title)` when `line` (without terminator) is an ATX heading.
pub(crate) fn parse_heading(line: &str) -> Option<(usize, String)> {
    let caps = heading_re().captures(line)?;
    let level = caps.get(1)?.as_str().len();
    let mut title = caps.get(2).map(|m| m.as_str()).unwrap_or("").trim().to_string();
    // "# ###" style headings whose whole title is a closing sequence
    if title.chars().all(|c| c == '#') {
        title.clear();
    }
    Some((level, title))
}

pub fn parse_markdown_bytes(bytes: &[u8]) -> Result<SectionNode, CorpusError> {
    let text = std::str::from_utf8(bytes).map_err(|e| CorpusError::InvalidEncoding {
        valid_up_to: e.valid_up_to(),
    })?;
    Ok(parse_markdown_str(text))
}

pub fn parse_markdown_tree(doc: &SourceDocument) -> SectionNode {
    parse_markdown_str(&doc.markdown)
}

/// Builds the tree. Nesting is structural: a heading becomes a child of the
/// nearest preceding heading with a strictly smaller level, so `depth` always
/// equals the length of `heading_path` even when levels are skipped.
pub fn parse_markdown_str(markdown: &str) -> SectionNode {
    let normalized = markdown.replace("\r\n", "\n");

    // Flat list of sections in document order, each with its heading level.
    struct Flat {
        level: usize,
        title: String,
        line: String,
        body: String,
    }
    let mut root_body = String::new();
    let mut flat: Vec<Flat> = Vec::new();
    let mut fence: Option<&'static str> = None;

    for line in normalized.split_inclusive('\n') {
        let bare = line.strip_suffix('\n').unwrap_or(line);
        let heading = if fence.is_none() { parse_heading(bare) } else { None };
        if let Some(marker) = fence_marker(bare) {
            match fence {
                None => fence = Some(marker),
                Some(open) if open == marker => fence = None,
                Some(_) => {}
            }
        }
        match heading {
            Some((level, title)) => flat.push(Flat {
                level,
                title,
                line: line.to_string(),
                body: String::new(),
            }),
            None => match flat.last_mut() {
                Some(section) => section.body.push_str(line),
                None => root_body.push_str(line),
            },
        }
    }

    let mut root = SectionNode::root();
    root.body = root_body;

    // Stack of (level, path of child indices from the root).
    let mut stack: Vec<(usize, Vec<usize>)> = Vec::new();
    for section in flat {
        while stack.last().is_some_and(|(lvl, _)| *lvl >= section.level) {
            stack.pop();
        }
        let parent_path: Vec<usize> = stack.last().map(|(_, p)| p.clone()).unwrap_or_default();
        let parent = node_at_mut(&mut root, &parent_path);
        let mut heading_path = parent.heading_path.clone();
        heading_path.push(section.title);
        let depth = heading_path.len();
        parent.children.push(SectionNode {
            heading_path,
            depth,
            heading_line: Some(section.line),
            body: section.body,
            children: Vec::new(),
        });
        let mut path = parent_path;
        path.push(parent.children.len() - 1);
        stack.push((section.level, path));
    }
    root
}

fn node_at_mut<'a>(root: &'a mut SectionNode, path: &[usize]) -> &'a mut SectionNode {
    path.iter().fold(root, |node, &i| &mut node.children[i])
}
