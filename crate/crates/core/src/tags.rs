//! `<tag>…</tag>` span scanning shared by the distiller and the evaluator.

/// A well-formed span: an opening tag followed by a closing tag with no
/// other opening tag of the same name in between. Offsets are byte indices
/// into the scanned text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TagSpan {
    /// Index of the `<` of the opening tag.
    pub start: usize,
    /// Index just past the `>` of the closing tag.
    pub end: usize,
    pub inner_start: usize,
    pub inner_end: usize,
}

impl TagSpan {
    pub fn inner<'a>(&self, text: &'a str) -> &'a str {
        &text[self.inner_start..self.inner_end]
    }
}

/// All well-formed, non-overlapping spans of `tag` in document order.
pub fn spans(text: &str, tag: &str) -> Vec<TagSpan> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let mut out = Vec::new();
    let mut cursor = 0;
    while let Some(rel) = text[cursor..].find(&open) {
        let start = cursor + rel;
        let inner_start = start + open.len();
        let Some(close_rel) = text[inner_start..].find(&close) else {
            break;
        };
        let inner_end = inner_start + close_rel;
        // a second opener before the closer makes this opener malformed;
        // retry from the inner opener
        if let Some(reopen) = text[inner_start..inner_end].find(&open) {
            cursor = inner_start + reopen;
            continue;
        }
        let end = inner_end + close.len();
        out.push(TagSpan {
            start,
            end,
            inner_start,
            inner_end,
        });
        cursor = end;
    }
    out
}

pub fn first_span(text: &str, tag: &str) -> Option<TagSpan> {
    spans(text, tag).into_iter().next()
}

pub fn last_span(text: &str, tag: &str) -> Option<TagSpan> {
    spans(text, tag).pop()
}

/// Whether `text` contains an opening or closing marker of `tag`.
pub fn contains_marker(text: &str, tag: &str) -> bool {
    text.contains(&format!("<{tag}>")) || text.contains(&format!("</{tag}>"))
}
