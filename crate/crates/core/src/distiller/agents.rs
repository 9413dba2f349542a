//! The three distillation agents: question writer, answerer, and the
//! postprocessor that rejects malformed samples and inlines dangling
//! references.

use serde::{Deserialize, Serialize};

use super::backend::{complete_with_retry, Agent, BackendError, ChatRequest, LlmBackend, RetryPolicy};
use super::references::{find_references, has_reference};
use super::{entry_id, EntryStatus, QtsaEntry, RejectReason};
use crate::corpus::LearningNode;
use crate::tags;

pub const PROMPT_VERSION: &str = "v1";
pub const QUESTION_PROMPT: &str = include_str!("../../prompts/question_v1.txt");
pub const ANSWER_PROMPT: &str = include_str!("../../prompts/answer_v1.txt");
pub const POSTPROCESS_PROMPT: &str = include_str!("../../prompts/postprocess_v1.txt");

const FIELD_TAGS: [&str; 5] = ["think", "answer", "question", "solution", "node"];

/// Per-call settings shared by the agents.
#[derive(Debug, Clone, Copy)]
pub struct CallContext {
    pub seed: u64,
    pub task_ordinal: Option<u64>,
    pub n_samples: usize,
    pub temperature: f64,
    pub max_tokens: u32,
    pub retry: RetryPolicy,
}

impl CallContext {
    fn request(&self, agent: Agent, system: &str, user: String) -> ChatRequest {
        let mut req = ChatRequest::new(Some(system), user);
        req.temperature = self.temperature;
        req.seed = self.seed;
        req.max_tokens = self.max_tokens;
        req.meta.agent = Some(agent);
        req.meta.task_ordinal = self.task_ordinal;
        req
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AgentError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("backend returned an empty generation")]
    EmptyGeneration,
}

/// Answerer output split into its three parts; absent parts are empty.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawAnswer {
    pub thinking: String,
    pub solution: String,
    pub answer: String,
}

fn node_block(node: &LearningNode) -> String {
    format!("<node>\n{}\n</node>", node.text)
}

pub fn question_request(node: &LearningNode, sample_idx: usize, ctx: &CallContext) -> ChatRequest {
    let user = format!(
        "{}\n\nSample index: {} of {}",
        node_block(node),
        sample_idx,
        ctx.n_samples
    );
    ctx.request(Agent::Question, QUESTION_PROMPT, user)
}

pub fn answer_request(node: &LearningNode, question: &str, ctx: &CallContext) -> ChatRequest {
    let user = format!("{}\n\nQuestion:\n{}", node_block(node), question);
    ctx.request(Agent::Answer, ANSWER_PROMPT, user)
}

pub fn rewrite_request(
    node: &LearningNode,
    question: &str,
    raw: &RawAnswer,
    references: &[String],
    ctx: &CallContext,
) -> ChatRequest {
    let user = format!(
        "{}\n\n<question>{}</question>\n<think>{}</think>\n<solution>{}</solution>\n<answer>{}</answer>\n\nReferences to resolve: {}",
        node_block(node),
        question,
        raw.thinking,
        raw.solution,
        raw.answer,
        references.join("; ")
    );
    ctx.request(Agent::Postprocess, POSTPROCESS_PROMPT, user)
}

/// Ψ_Q: one question about `node`.
pub fn generate_question(
    node: &LearningNode,
    sample_idx: usize,
    backend: &dyn LlmBackend,
    ctx: &CallContext,
) -> Result<String, AgentError> {
    let req = question_request(node, sample_idx, ctx);
    let resp = complete_with_retry(backend, &req, &ctx.retry)?;
    let q = resp.content.trim();
    if q.is_empty() {
        return Err(AgentError::EmptyGeneration);
    }
    Ok(q.to_string())
}

/// Ψ_A: answer `question` with the node as reference material.
pub fn answer_question(
    node: &LearningNode,
    question: &str,
    backend: &dyn LlmBackend,
    ctx: &CallContext,
) -> Result<RawAnswer, BackendError> {
    let req = answer_request(node, question, ctx);
    let resp = complete_with_retry(backend, &req, &ctx.retry)?;
    Ok(parse_answer_response(&resp.content))
}

/// Split an answerer response into thinking / solution / answer.
///
/// * thinking: inside the first well-formed `<think>` span (or, when the
///   opener is missing, everything before the first `</think>`);
/// * answer: inside the first well-formed `<answer>` span after the thinking;
/// * solution: the text between the two.
///
/// All parts are whitespace-trimmed; missing parts are empty.
pub fn parse_answer_response(text: &str) -> RawAnswer {
    let (thinking, rest_start) = match tags::first_span(text, "think") {
        Some(span) => (span.inner(text).trim().to_string(), span.end),
        None => match text.find("</think>") {
            Some(i) if !text[..i].contains("<think>") => {
                (text[..i].trim().to_string(), i + "</think>".len())
            }
            _ => (String::new(), 0),
        },
    };
    let rest = &text[rest_start..];
    let (solution, answer) = match tags::first_span(rest, "answer") {
        Some(span) => (
            rest[..span.start].trim().to_string(),
            span.inner(rest).trim().to_string(),
        ),
        None => (rest.trim().to_string(), String::new()),
    };
    RawAnswer {
        thinking,
        solution,
        answer,
    }
}

fn missing_field(question: &str, raw: &RawAnswer) -> Option<RejectReason> {
    if question.trim().is_empty() {
        Some(RejectReason::MissingQuestion)
    } else if raw.thinking.trim().is_empty() {
        Some(RejectReason::MissingThinking)
    } else if raw.solution.trim().is_empty() {
        Some(RejectReason::MissingSolution)
    } else if raw.answer.trim().is_empty() {
        Some(RejectReason::MissingAnswer)
    } else {
        None
    }
}

fn has_tag_markers(fields: [&str; 4]) -> bool {
    fields
        .iter()
        .any(|f| FIELD_TAGS.iter().any(|t| tags::contains_marker(f, t)))
}

fn references_in(fields: [&str; 4]) -> Vec<String> {
    fields.iter().flat_map(|f| find_references(f)).collect()
}

/// Ψ_P: validate a raw sample and decouple it from the source.
///
/// Rejects samples with an empty field or stray tag markers. When any field
/// references the source, one rewrite request is sent; the sample is kept
/// only if the rewrite comes back complete and reference-free.
pub fn postprocess(
    node: &LearningNode,
    sample_idx: usize,
    question: &str,
    raw: &RawAnswer,
    backend: &dyn LlmBackend,
    ctx: &CallContext,
) -> QtsaEntry {
    let question = question.trim();
    let raw = RawAnswer {
        thinking: raw.thinking.trim().to_string(),
        solution: raw.solution.trim().to_string(),
        answer: raw.answer.trim().to_string(),
    };
    let build = |q: &str, r: &RawAnswer, status: EntryStatus| QtsaEntry {
        entry_id: entry_id(&node.node_id, sample_idx),
        node_id: node.node_id.clone(),
        sample_idx,
        question: q.to_string(),
        thinking: r.thinking.clone(),
        solution: r.solution.clone(),
        answer: r.answer.clone(),
        status,
    };
    let reject = |reason| build(question, &raw, EntryStatus::Rejected(reason));

    if let Some(reason) = missing_field(question, &raw) {
        return reject(reason);
    }
    let fields = [question, &raw.thinking, &raw.solution, &raw.answer];
    if has_tag_markers(fields) {
        return reject(RejectReason::MalformedTags);
    }
    let refs = references_in(fields);
    if refs.is_empty() {
        return build(question, &raw, EntryStatus::Kept);
    }

    let req = rewrite_request(node, question, &raw, &refs, ctx);
    let resp = match complete_with_retry(backend, &req, &ctx.retry) {
        Ok(r) => r,
        Err(e) => {
            log::warn!("rewrite failed for {}#{sample_idx}: {e}", node.node_id);
            return reject(RejectReason::BackendFailure);
        }
    };
    let text = resp.content;
    let field = |tag| tags::first_span(&text, tag).map(|s| s.inner(&text).trim().to_string());
    let (Some(q), Some(t), Some(s), Some(a)) = (
        field("question"),
        field("think"),
        field("solution"),
        field("answer"),
    ) else {
        return reject(RejectReason::UnresolvedReference);
    };
    let rewritten = RawAnswer {
        thinking: t,
        solution: s,
        answer: a,
    };
    if missing_field(&q, &rewritten).is_some() {
        return reject(RejectReason::UnresolvedReference);
    }
    let fields = [q.as_str(), &rewritten.thinking, &rewritten.solution, &rewritten.answer];
    if has_tag_markers(fields) {
        return reject(RejectReason::MalformedTags);
    }
    if fields.iter().any(|f| has_reference(f)) {
        return reject(RejectReason::UnresolvedReference);
    }
    build(&q, &rewritten, EntryStatus::Kept)
}
