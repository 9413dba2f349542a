//! Offline backend that plays all three agents deterministically.
//!
//! Every response is a pure function of the request and the mock's seed, so
//! pipelines run against it are reproducible bit for bit. Fault injection
//! knobs exercise the rejection paths.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::backend::{Agent, BackendError, ChatRequest, ChatResponse, LlmBackend};
use super::references::find_references;
use crate::tags;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockBehavior {
    /// Answer calls whose task ordinal is a multiple of this omit the
    /// `<answer>` span.
    pub missing_answer_every: Option<u64>,
    /// Answers cite "Table 4.1" instead of stating the data.
    pub dangling_reference: bool,
    /// Rewrite requests echo the fields back unchanged.
    pub rewrite_fails: bool,
    /// Question requests return blank content.
    pub blank_questions: bool,
    /// The first N calls overall fail with a transient error.
    pub transient_failures: u64,
}

#[derive(Debug)]
pub struct MockBackend {
    seed: u64,
    behavior: MockBehavior,
    calls: AtomicU64,
    transcript: Mutex<Vec<ChatRequest>>,
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        Self::with_behavior(seed, MockBehavior::default())
    }

    pub fn with_behavior(seed: u64, behavior: MockBehavior) -> Self {
        MockBackend {
            seed,
            behavior,
            calls: AtomicU64::new(0),
            transcript: Mutex::new(Vec::new()),
        }
    }

    /// Every request received so far, in arrival order.
    pub fn transcript(&self) -> Vec<ChatRequest> {
        self.transcript.lock().expect("transcript lock").clone()
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    fn digest(&self, req: &ChatRequest) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(req.seed.to_le_bytes());
        for m in &req.messages {
            h.update(m.role.to_string().as_bytes());
            h.update([0]);
            h.update(m.content.as_bytes());
            h.update([0]);
        }
        h.finalize().into()
    }

    fn respond(&self, req: &ChatRequest) -> String {
        let digest = self.digest(req);
        let user = req.last_user().unwrap_or("");
        let node = extract_between(user, "<node>\n", "\n</node>").unwrap_or("");
        let facts = NodeFacts::new(node, &digest);
        match agent_of(req) {
            Some(Agent::Question) => {
                if self.behavior.blank_questions {
                    return "   ".into();
                }
                let sample = user
                    .rsplit("Sample index: ")
                    .next()
                    .and_then(|s| s.split_whitespace().next())
                    .unwrap_or("0");
                format!(
                    "For {}, what determines the behavior of the {} and how would you estimate it? (variant {}-{})",
                    facts.topic,
                    facts.keyword,
                    sample,
                    hex::encode(&digest[..2])
                )
            }
            Some(Agent::Answer) => {
                let mut solution = format!(
                    "Start from the relation stated for {}: {} Applying it to the question identifies the {} as the governing quantity.",
                    facts.topic, facts.sentence, facts.keyword
                );
                if self.behavior.dangling_reference {
                    solution.push_str(" The supporting values are as shown in Table 4.1.");
                }
                let thinking = format!(
                    "The question is about {}. Key fact: {} I should connect it to the {}.",
                    facts.topic, facts.sentence, facts.keyword
                );
                let malformed = match (self.behavior.missing_answer_every, req.meta.task_ordinal) {
                    (Some(n), Some(ord)) if n > 0 => ord % n == 0,
                    _ => false,
                };
                if malformed {
                    format!("<think>\n{thinking}\n</think>\n\n{solution}\n")
                } else {
                    format!(
                        "<think>\n{thinking}\n</think>\n\n{solution}\n\n<answer>The {}</answer>",
                        facts.keyword
                    )
                }
            }
            Some(Agent::Postprocess) => {
                let field = |tag| {
                    tags::first_span(user, tag)
                        .map(|s| s.inner(user).to_string())
                        .unwrap_or_default()
                };
                let fix = |text: String| {
                    if self.behavior.rewrite_fails {
                        return text;
                    }
                    let mut out = text;
                    for r in find_references(&out) {
                        let inline = format!("the tabulated data for {} ({})", facts.topic, facts.sentence_short());
                        out = out.replace(&r, &inline);
                    }
                    out
                };
                format!(
                    "<question>{}</question>\n<think>{}</think>\n<solution>{}</solution>\n<answer>{}</answer>",
                    fix(field("question")),
                    fix(field("think")),
                    fix(field("solution")),
                    fix(field("answer"))
                )
            }
            Some(Agent::Evaluation) | None => {
                // multiple-choice style: pick an option letter from the digest
                let letters: Vec<char> = user
                    .lines()
                    .filter_map(|l| {
                        let mut cs = l.chars();
                        match (cs.next(), cs.next()) {
                            (Some(c), Some(')')) if c.is_ascii_uppercase() => Some(c),
                            _ => None,
                        }
                    })
                    .collect();
                match letters.get(digest[0] as usize % letters.len().max(1)) {
                    Some(c) => format!("<think>\nweighing the options\n</think>\n\n<answer>{c}</answer>"),
                    None => "I cannot answer that.".into(),
                }
            }
        }
    }
}

impl LlmBackend for MockBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        self.transcript
            .lock()
            .expect("transcript lock")
            .push(request.clone());
        if n < self.behavior.transient_failures {
            return Err(BackendError::Transient(format!("mock transient failure #{}", n + 1)));
        }
        Ok(ChatResponse {
            content: self.respond(request),
            finish_reason: "stop".into(),
        })
    }

    fn supports_seed(&self) -> bool {
        true
    }
}

fn agent_of(req: &ChatRequest) -> Option<Agent> {
    if let Some(agent) = req.meta.agent {
        return Some(agent);
    }
    let sys = req.system_prompt()?;
    if sys.starts_with("[granary:question-agent") {
        Some(Agent::Question)
    } else if sys.starts_with("[granary:answer-agent") {
        Some(Agent::Answer)
    } else if sys.starts_with("[granary:postprocess-agent") {
        Some(Agent::Postprocess)
    } else {
        None
    }
}

fn extract_between<'a>(text: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let start = text.find(open)? + open.len();
    let len = text[start..].find(close)?;
    Some(&text[start..start + len])
}

/// Surface features of a node the mock builds its prose from.
struct NodeFacts {
    topic: String,
    keyword: String,
    sentence: String,
}

impl NodeFacts {
    fn new(node: &str, digest: &[u8; 32]) -> Self {
        let mut lines = node.lines();
        let breadcrumb = lines.next().unwrap_or("");
        let topic = breadcrumb
            .rsplit(" > ")
            .next()
            .filter(|s| !s.trim().is_empty())
            .unwrap_or("the topic")
            .trim()
            .to_string();
        let body: String = lines.collect::<Vec<_>>().join(" ");
        let words: Vec<String> = body
            .split(|c: char| !c.is_alphanumeric() && c != '-')
            .filter(|w| w.len() >= 6 && w.chars().all(|c| c.is_ascii_lowercase() || c == '-'))
            .map(str::to_string)
            .collect();
        let keyword = if words.is_empty() {
            "circuit".to_string()
        } else {
            let pick = u16::from_le_bytes([digest[4], digest[5]]) as usize % words.len();
            words[pick].clone()
        };
        let sentence = body
            .split_inclusive(['.', '!', '?'])
            .map(str::trim)
            .find(|s| s.len() > 20 && find_references(s).is_empty())
            .unwrap_or("the governing relation follows from first principles.")
            .to_string();
        NodeFacts {
            topic,
            keyword,
            sentence,
        }
    }

    fn sentence_short(&self) -> String {
        let s: String = self.sentence.chars().take(80).collect();
        s.trim_end_matches('.').to_string()
    }
}
