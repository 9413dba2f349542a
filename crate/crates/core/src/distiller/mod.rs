//! Multi-agent QTSA distillation.
//!
//! For every learning node and every sample index `0..n_samples`, a question
//! agent writes a question, an answer agent solves it with the node as
//! reference (reasoning in `<think>`, final answer in `<answer>`), and a
//! postprocessor rejects malformed samples and rewrites references to the
//! source ("Table 4.1", "this section") into their content.
//!
//! Runs are journaled: completed `(node_id, sample_idx)` pairs are never
//! queried again, and the output is sorted into canonical order, so an
//! interrupted run resumed later produces the same file as an uninterrupted
//! one.

pub mod agents;
pub mod backend;
pub mod http;
mod journal;
pub mod mock;
pub mod references;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::LearningNode;
use crate::jsonl::JsonlError;

pub use agents::{
    answer_question, generate_question, parse_answer_response, postprocess, AgentError, CallContext,
    RawAnswer, PROMPT_VERSION,
};
pub use backend::{
    complete_with_retry, Agent, BackendError, ChatMessage, ChatRequest, ChatResponse, LlmBackend,
    RequestMeta, RetryPolicy, Role,
};
pub use http::{HttpBackend, HttpBackendConfig, API_KEY_ENV};
pub use journal::{spool_path, JournalRecord};
pub use mock::{MockBackend, MockBehavior};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    MissingQuestion,
    MissingThinking,
    MissingSolution,
    MissingAnswer,
    MalformedTags,
    UnresolvedReference,
    BackendFailure,
}

impl RejectReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            RejectReason::MissingQuestion => "missing_question",
            RejectReason::MissingThinking => "missing_thinking",
            RejectReason::MissingSolution => "missing_solution",
            RejectReason::MissingAnswer => "missing_answer",
            RejectReason::MalformedTags => "malformed_tags",
            RejectReason::UnresolvedReference => "unresolved_reference",
            RejectReason::BackendFailure => "backend_failure",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryStatus {
    Kept,
    Rejected(RejectReason),
}

/// One distilled `[question, thinking, solution, answer]` sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "QtsaWire", into = "QtsaWire")]
pub struct QtsaEntry {
    pub entry_id: String,
    pub node_id: String,
    pub sample_idx: usize,
    pub question: String,
    pub thinking: String,
    pub solution: String,
    pub answer: String,
    pub status: EntryStatus,
}

impl QtsaEntry {
    pub fn is_kept(&self) -> bool {
        self.status == EntryStatus::Kept
    }

    pub fn reject_reason(&self) -> Option<RejectReason> {
        match self.status {
            EntryStatus::Kept => None,
            EntryStatus::Rejected(r) => Some(r),
        }
    }
}

/// On-disk shape of a `qtsa.jsonl` line.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QtsaWire {
    entry_id: String,
    node_id: String,
    sample_idx: usize,
    question: String,
    thinking: String,
    solution: String,
    answer: String,
    status: String,
    #[serde(deserialize_with = "Option::deserialize")]
    reject_reason: Option<RejectReason>,
}

impl From<QtsaEntry> for QtsaWire {
    fn from(e: QtsaEntry) -> Self {
        let (status, reject_reason) = match e.status {
            EntryStatus::Kept => ("kept", None),
            EntryStatus::Rejected(r) => ("rejected", Some(r)),
        };
        QtsaWire {
            entry_id: e.entry_id,
            node_id: e.node_id,
            sample_idx: e.sample_idx,
            question: e.question,
            thinking: e.thinking,
            solution: e.solution,
            answer: e.answer,
            status: status.into(),
            reject_reason,
        }
    }
}

impl TryFrom<QtsaWire> for QtsaEntry {
    type Error = String;

    fn try_from(w: QtsaWire) -> Result<Self, String> {
        let status = match (w.status.as_str(), w.reject_reason) {
            ("kept", None) => EntryStatus::Kept,
            ("rejected", Some(r)) => EntryStatus::Rejected(r),
            ("kept", Some(_)) => return Err("kept entry must have reject_reason null".into()),
            ("rejected", None) => return Err("rejected entry needs a reject_reason".into()),
            (other, _) => return Err(format!("unknown status {other:?}")),
        };
        Ok(QtsaEntry {
            entry_id: w.entry_id,
            node_id: w.node_id,
            sample_idx: w.sample_idx,
            question: w.question,
            thinking: w.thinking,
            solution: w.solution,
            answer: w.answer,
            status,
        })
    }
}

pub fn entry_id(node_id: &str, sample_idx: usize) -> String {
    let prefix: String = node_id.chars().take(16).collect();
    format!("{prefix}-s{sample_idx}")
}

/// Backend seed for a task: the first 8 bytes of SHA-256(node_id ‖ idx),
/// masked to 63 bits so it is a valid signed JSON integer everywhere.
pub fn task_seed(node_id: &str, sample_idx: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(node_id.as_bytes());
    h.update([0x1f]);
    h.update((sample_idx as u64).to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")) & (u64::MAX >> 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub n_samples: usize,
    pub parallelism: usize,
    pub retry: RetryPolicy,
    pub journal_path: Option<PathBuf>,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Stop after completing this many new tasks (the journal keeps the
    /// rest for a later run).
    pub max_new_tasks: Option<usize>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            n_samples: 5,
            parallelism: 4,
            retry: RetryPolicy::default(),
            journal_path: None,
            temperature: 0.6,
            max_tokens: 8192,
            max_new_tasks: None,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        if self.n_samples == 0 {
            return Err(DistillError::InvalidConfig("n_samples must be >= 1".into()));
        }
        if self.parallelism == 0 {
            return Err(DistillError::InvalidConfig("parallelism must be >= 1".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(DistillError::InvalidConfig("temperature must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DistillError {
    #[error("invalid distill config: {0}")]
    InvalidConfig(String),
    #[error("journal: {0}")]
    Journal(#[from] JsonlError),
}

/// Per-agent backends; the postprocessor may use a different model.
#[derive(Clone, Copy)]
pub struct AgentBackends<'a> {
    pub question: &'a dyn LlmBackend,
    pub answer: &'a dyn LlmBackend,
    pub postprocess: &'a dyn LlmBackend,
}

impl<'a> AgentBackends<'a> {
    pub fn shared(backend: &'a dyn LlmBackend) -> Self {
        AgentBackends {
            question: backend,
            answer: backend,
            postprocess: backend,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistillStats {
    pub attempted: usize,
    pub kept: usize,
    pub rejected: usize,
    pub rejected_by_reason: BTreeMap<String, usize>,
    pub resumed: usize,
    pub newly_processed: usize,
    pub complete: bool,
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    /// Sorted by (node order, sample_idx).
    pub entries: Vec<QtsaEntry>,
    pub stats: DistillStats,
}

/// Run one `(node, sample)` task end to end. Backend failures become
/// rejected entries rather than errors.
pub fn distill_one(
    node: &LearningNode,
    sample_idx: usize,
    backends: AgentBackends<'_>,
    ctx: &CallContext,
) -> QtsaEntry {
    let rejected = |question: String, raw: RawAnswer, reason| QtsaEntry {
        entry_id: entry_id(&node.node_id, sample_idx),
        node_id: node.node_id.clone(),
        sample_idx,
        question,
        thinking: raw.thinking,
        solution: raw.solution,
        answer: raw.answer,
        status: EntryStatus::Rejected(reason),
    };
    let question = match generate_question(node, sample_idx, backends.question, ctx) {
        Ok(q) => q,
        Err(AgentError::EmptyGeneration) => {
            return rejected(String::new(), RawAnswer::default(), RejectReason::MissingQuestion)
        }
        Err(AgentError::Backend(e)) => {
            log::warn!("question agent failed for {}#{sample_idx}: {e}", node.node_id);
            return rejected(String::new(), RawAnswer::default(), RejectReason::BackendFailure);
        }
    };
    let raw = match answer_question(node, &question, backends.answer, ctx) {
        Ok(r) => r,
        Err(e) => {
            log::warn!("answer agent failed for {}#{sample_idx}: {e}", node.node_id);
            return rejected(question, RawAnswer::default(), RejectReason::BackendFailure);
        }
    };
    postprocess(node, sample_idx, &question, &raw, backends.postprocess, ctx)
}

pub fn distill_corpus(
    nodes: &[LearningNode],
    cfg: &DistillConfig,
    backend: &dyn LlmBackend,
) -> Result<DistillOutcome, DistillError> {
    distill_corpus_with(nodes, cfg, AgentBackends::shared(backend))
}

/// Distill every node `cfg.n_samples` times with a bounded worker pool.
pub fn distill_corpus_with(
    nodes: &[LearningNode],
    cfg: &DistillConfig,
    backends: AgentBackends<'_>,
) -> Result<DistillOutcome, DistillError> {
    cfg.validate()?;
    let n_s = cfg.n_samples;

    let (journal, mut completed) = match &cfg.journal_path {
        Some(path) => {
            let (j, done) = journal::Journal::open(path)?;
            (Some(Mutex::new(j)), done)
        }
        None => (None, BTreeMap::new()),
    };
    // forget journal entries for nodes that are no longer in the input
    let wanted: std::collections::HashSet<(String, usize)> = nodes
        .iter()
        .flat_map(|n| (0..n_s).map(move |s| (n.node_id.clone(), s)))
        .collect();
    completed.retain(|k, _| wanted.contains(k));
    let resumed = completed.len();

    // canonical task order: node order, then sample index
    let mut pending: Vec<(usize, usize)> = Vec::new();
    for (ni, node) in nodes.iter().enumerate() {
        for s in 0..n_s {
            if !completed.contains_key(&(node.node_id.clone(), s)) {
                pending.push((ni, s));
            }
        }
    }
    if let Some(limit) = cfg.max_new_tasks {
        pending.truncate(limit);
    }

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<QtsaEntry>> = Mutex::new(Vec::with_capacity(pending.len()));
    let failure: Mutex<Option<JsonlError>> = Mutex::new(None);

    std::thread::scope(|scope| {
        for _ in 0..cfg.parallelism.min(pending.len().max(1)) {
            scope.spawn(|| loop {
                if failure.lock().expect("failure lock").is_some() {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(ni, s)) = pending.get(i) else {
                    break;
                };
                let node = &nodes[ni];
                let ctx = CallContext {
                    seed: task_seed(&node.node_id, s),
                    task_ordinal: Some((ni * n_s + s + 1) as u64),
                    n_samples: n_s,
                    temperature: cfg.temperature,
                    max_tokens: cfg.max_tokens,
                    retry: cfg.retry,
                };
                let entry = distill_one(node, s, backends, &ctx);
                if let Some(j) = &journal {
                    if let Err(e) = j.lock().expect("journal lock").record(&entry) {
                        failure.lock().expect("failure lock").get_or_insert(e);
                        break;
                    }
                }
                results.lock().expect("results lock").push(entry);
            });
        }
    });

    if let Some(e) = failure.into_inner().expect("failure lock") {
        return Err(DistillError::Journal(e));
    }
    let fresh = results.into_inner().expect("results lock");
    let newly_processed = fresh.len();
    for e in fresh {
        completed.insert((e.node_id.clone(), e.sample_idx), e);
    }

    let order: BTreeMap<&str, usize> = nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.node_id.as_str(), i))
        .collect();
    let mut entries: Vec<QtsaEntry> = completed.into_values().collect();
    entries.sort_by_key(|e| (order[e.node_id.as_str()], e.sample_idx));

    let mut rejected_by_reason = BTreeMap::new();
    for e in &entries {
        if let Some(r) = e.reject_reason() {
            *rejected_by_reason.entry(r.as_str().to_string()).or_insert(0) += 1;
        }
    }
    let kept = entries.iter().filter(|e| e.is_kept()).count();
    let stats = DistillStats {
        attempted: entries.len(),
        kept,
        rejected: entries.len() - kept,
        rejected_by_reason,
        resumed,
        newly_processed,
        complete: entries.len() == nodes.len() * n_s,
    };
    Ok(DistillOutcome { entries, stats })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(status: EntryStatus) -> QtsaEntry {
        QtsaEntry {
            entry_id: "e".into(),
            node_id: "n".into(),
            sample_idx: 1,
            question: "q".into(),
            thinking: "t".into(),
            solution: "s".into(),
            answer: "a".into(),
            status,
        }
    }

    #[test]
    fn wire_format_has_exact_keys() {
        let v = serde_json::to_value(entry(EntryStatus::Kept)).unwrap();
        let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        assert_eq!(
            keys,
            vec![
                "answer",
                "entry_id",
                "node_id",
                "question",
                "reject_reason",
                "sample_idx",
                "solution",
                "status",
                "thinking"
            ]
        );
        assert_eq!(v["reject_reason"], serde_json::Value::Null);
        let r = serde_json::to_value(entry(EntryStatus::Rejected(RejectReason::MissingAnswer))).unwrap();
        assert_eq!(r["status"], "rejected");
        assert_eq!(r["reject_reason"], "missing_answer");
    }

    #[test]
    fn inconsistent_status_is_a_schema_violation() {
        let mut v = serde_json::to_value(entry(EntryStatus::Kept)).unwrap();
        v["reject_reason"] = "missing_answer".into();
        assert!(serde_json::from_value::<QtsaEntry>(v).is_err());
        let mut v = serde_json::to_value(entry(EntryStatus::Kept)).unwrap();
        v.as_object_mut().unwrap().remove("reject_reason");
        assert!(serde_json::from_value::<QtsaEntry>(v).is_err());
    }

    #[test]
    fn seeds_and_ids_are_deterministic() {
        assert_eq!(task_seed("abc", 0), task_seed("abc", 0));
        assert_ne!(task_seed("abc", 0), task_seed("abc", 1));
        assert!(task_seed("abc", 3) < 1 << 63);
        assert_eq!(entry_id("0123456789abcdef0123", 4), "0123456789abcdef-s4");
    }

    #[test]
    fn zero_samples_is_invalid() {
        let cfg = DistillConfig {
            n_samples: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
