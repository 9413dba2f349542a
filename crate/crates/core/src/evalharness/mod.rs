//! Multiple-choice evaluation: render, answer at temperature 0, extract the
//! chosen letter, score.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::LazyLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::dataset::{ASSISTANT_DELIM, SYSTEM_DELIM, USER_DELIM};
use crate::distiller::{complete_with_retry, Agent, BackendError, ChatRequest, LlmBackend, RetryPolicy};
use crate::jsonl::{read_jsonl, JsonlError};
use crate::tags;
use crate::tinylm::{greedy_decode, ByteTokenizer, Parameters, BOS};

pub const EVAL_SYSTEM_PROMPT: &str = include_str!("../../prompts/eval_v1.txt");

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("quiz is empty")]
    NoItems,
    #[error("item {item_id}: {message}")]
    InvalidItem { item_id: String, message: String },
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("could not start worker pool: {0}")]
    Pool(String),
}

/// One line of `quiz.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McqItem {
    pub item_id: String,
    pub stem: String,
    pub options: BTreeMap<String, String>,
    pub correct: String,
}

impl McqItem {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |message: String| {
            Err(EvalError::InvalidItem {
                item_id: self.item_id.clone(),
                message,
            })
        };
        if self.options.len() < 2 {
            return bad(format!("needs at least 2 options, has {}", self.options.len()));
        }
        if let Some(k) = self.options.keys().find(|k| !is_letter(k)) {
            return bad(format!("option key {k:?} is not a single capital letter"));
        }
        if !self.options.contains_key(&self.correct) {
            return bad(format!("correct answer {:?} is not an option", self.correct));
        }
        Ok(())
    }
}

fn is_letter(s: &str) -> bool {
    s.len() == 1 && s.as_bytes()[0].is_ascii_uppercase()
}

pub fn load_quiz(path: &Path) -> Result<Vec<McqItem>, EvalError> {
    let items: Vec<McqItem> = read_jsonl(path)?;
    for item in &items {
        item.validate()?;
    }
    Ok(items)
}

pub fn render_user_prompt(item: &McqItem) -> String {
    let mut text = item.stem.trim().to_string();
    text.push('\n');
    for (letter, option) in &item.options {
        text.push_str(&format!("\n{letter}) {option}"));
    }
    text
}

pub fn render_eval_prompt(item: &McqItem) -> ChatRequest {
    let mut req = ChatRequest::new(Some(EVAL_SYSTEM_PROMPT), render_user_prompt(item));
    req.temperature = 0.0;
    req.meta.agent = Some(Agent::Evaluation);
    req
}

static FALLBACK: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i:\banswer\b)(?:\s+(?i:is))?\s*[:\-]?\s*\(?([A-Z])\)?(?:[^A-Za-z0-9]|$)").expect("valid regex")
});

/// The chosen letter: the content of the last well-formed `<answer>` span
/// if it is a single capital letter (optionally parenthesized or followed
/// by `)` / `.`), otherwise the last "answer: X" / "the answer is X" phrase.
pub fn extract_answer(text: &str) -> Option<String> {
    if let Some(span) = tags::last_span(text, "answer") {
        let inner = span.inner(text).trim();
        let bare = inner
            .strip_prefix('(')
            .and_then(|s| s.strip_suffix(')'))
            .unwrap_or(inner)
            .trim_end_matches([')', '.'])
            .trim();
        if is_letter(bare) {
            return Some(bare.to_string());
        }
    }
    FALLBACK
        .captures_iter(text)
        .last()
        .map(|c| c[1].to_string())
}

/// Anything that can answer an evaluation request.
pub trait Responder: Sync {
    fn respond(&self, request: &ChatRequest) -> Result<String, BackendError>;
}

impl<F> Responder for F
where
    F: Fn(&ChatRequest) -> Result<String, BackendError> + Sync,
{
    fn respond(&self, request: &ChatRequest) -> Result<String, BackendError> {
        self(request)
    }
}

pub struct BackendResponder<'a> {
    pub backend: &'a dyn LlmBackend,
    pub retry: RetryPolicy,
}

impl Responder for BackendResponder<'_> {
    fn respond(&self, request: &ChatRequest) -> Result<String, BackendError> {
        complete_with_retry(self.backend, request, &self.retry).map(|r| r.content)
    }
}

/// Greedy decoding with the tiny model, prompted in the training chat
/// format.
pub struct ModelResponder<'a> {
    pub params: &'a Parameters,
    pub max_new_tokens: usize,
}

impl Responder for ModelResponder<'_> {
    fn respond(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let mut prompt = String::new();
        if let Some(sys) = request.system_prompt().filter(|s| !s.is_empty()) {
            prompt.push_str(SYSTEM_DELIM);
            prompt.push_str(sys);
        }
        prompt.push_str(USER_DELIM);
        prompt.push_str(request.last_user().unwrap_or(""));
        prompt.push_str(ASSISTANT_DELIM);
        let tok = ByteTokenizer;
        let mut ids = vec![BOS];
        ids.extend(tok.encode_str(&prompt));
        let out = greedy_decode(self.params, &ids, self.max_new_tokens)
            .map_err(|e| BackendError::Permanent(format!("tiny model: {e}")))?;
        Ok(tok.decode_lossy(&out))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemResult {
    pub item_id: String,
    pub extracted: Option<String>,
    pub correct: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub items: usize,
    pub correct: usize,
    pub answered: usize,
    pub unparsable: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub counts: EvalCounts,
    pub per_item: Vec<ItemResult>,
}

fn grade_item(item: &McqItem, responder: &dyn Responder) -> ItemResult {
    let extracted = match responder.respond(&render_eval_prompt(item)) {
        Ok(text) => extract_answer(&text),
        Err(e) => {
            log::warn!("item {}: {e}", item.item_id);
            None
        }
    };
    ItemResult {
        item_id: item.item_id.clone(),
        correct: extracted.as_deref() == Some(item.correct.as_str()),
        extracted,
    }
}

/// Ask `responder` every item once, with at most `parallelism` requests in
/// flight. Unparsable responses and backend failures count as incorrect.
pub fn grade(items: &[McqItem], responder: &dyn Responder, parallelism: usize) -> Result<EvalReport, EvalError> {
    if items.is_empty() {
        return Err(EvalError::NoItems);
    }
    for item in items {
        item.validate()?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| EvalError::Pool(e.to_string()))?;
    let per_item: Vec<ItemResult> = pool.install(|| items.par_iter().map(|it| grade_item(it, responder)).collect());
    let correct = per_item.iter().filter(|r| r.correct).count();
    let answered = per_item.iter().filter(|r| r.extracted.is_some()).count();
    Ok(EvalReport {
        accuracy: correct as f64 / items.len() as f64,
        counts: EvalCounts {
            items: items.len(),
            correct,
            answered,
            unparsable: items.len() - answered,
        },
        per_item,
    })
}
