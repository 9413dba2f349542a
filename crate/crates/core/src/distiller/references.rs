//! Dangling references to the source text ("Eq. (3.2)", "Table 4.1",
//! "this section", ...) that make a distilled sample meaningless without
//! the book next to it.

use std::sync::OnceLock;

use regex::Regex;

fn patterns() -> &'static [Regex] {
    static PATTERNS: OnceLock<Vec<Regex>> = OnceLock::new();
    PATTERNS.get_or_init(|| {
        [
            r"(?i)\b(?:eqs?|eqn|equations?)\.?\s*\(\s*\d+(?:[.\-]\d+)*[a-z]?\s*\)",
            r"(?i)\b(?:eqs?|eqn|equations?)\.?\s+\d+(?:[.\-]\d+)*",
            r"(?i)\b(?:tables?|tab|figures?|figs?)\.?\s*\d+(?:[.\-]\d+)*",
            r"(?i)\b(?:sections?|chapters?|sec)\.?\s*\d+(?:\.\d+)*",
            r"(?i)\bthis\s+(?:section|chapter)\b",
            r"(?i)\bas\s+(?:shown|given|described|discussed|derived|stated|defined|noted|seen)\s+(?:above|below|earlier|previously)\b",
            r"(?i)\bas\s+(?:shown|given|described|discussed|derived)\s+in\s+the\s+(?:text|book|previous\s+section)\b",
            r"(?i)\b(?:the\s+)?(?:table|figure|equation|formula)s?\s+(?:above|below)\b",
        ]
        .iter()
        .map(|p| Regex::new(p).expect("valid reference pattern"))
        .collect()
    })
}

/// Every matched reference, in order of appearance.
pub fn find_references(text: &str) -> Vec<String> {
    let mut hits: Vec<(usize, String)> = patterns()
        .iter()
        .flat_map(|re| re.find_iter(text).map(|m| (m.start(), m.as_str().to_string())))
        .collect();
    hits.sort();
    hits.dedup();
    hits.into_iter().map(|(_, s)| s).collect()
}

pub fn has_reference(text: &str) -> bool {
    patterns().iter().any(|re| re.is_match(text))
}
