//! Training data: chat rendering, loss masks, packing and mixing.
//!
//! Domain samples become chat examples whose assistant turn is the QTSA
//! template; raw learning-node text becomes continual-pretraining records.
//! Everything is byte-tokenized with [`ByteTokenizer`].

mod packing;

use rand::seq::{index::sample, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::LearningNode;
use crate::distiller::QtsaEntry;
use crate::jsonl::JsonlError;
use crate::tinylm::{ByteTokenizer, TokenId, BOS, EOS};

pub use packing::{pack_sequences, read_packed, write_packed, PackedSequence, PackedSidecar, Segment};

pub const SYSTEM_DELIM: &str = "\n<|system|>\n";
pub const USER_DELIM: &str = "\n<|user|>\n";
pub const ASSISTANT_DELIM: &str = "\n<|assistant|>\n";
pub const DEFAULT_MAX_LEN: usize = 8192;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("entry {0} was rejected by the postprocessor and cannot be rendered")]
    RejectedEntry(String),
    #[error("example {id} needs {len} tokens even after truncation (max_len {max_len})")]
    OversizedExample { id: String, len: usize, max_len: usize },
    #[error("invalid mixing ratio {0}; must be finite and > 0")]
    InvalidRatio(f64),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("{path}: {message}")]
    Packed { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Domain,
    General,
}

/// One line of `sft_dataset.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatExample {
    pub id: String,
    pub origin: Origin,
    pub system: String,
    pub user: String,
    pub assistant: String,
}

/// One line of `cpt_dataset.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CptRecord {
    pub node_id: String,
    pub text: String,
}

impl From<&LearningNode> for CptRecord {
    fn from(node: &LearningNode) -> Self {
        CptRecord {
            node_id: node.node_id.clone(),
            text: node.text.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedExample {
    pub input_ids: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
}

impl TokenizedExample {
    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }

    pub fn supervised_tokens(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

pub fn render_assistant(thinking: &str, solution: &str, answer: &str) -> String {
    format!("<think>\n{thinking}\n</think>\n\n{solution}\n\n<answer>{answer}</answer>")
}

pub fn render_chat_template(entry: &QtsaEntry, system_prompt: &str) -> Result<ChatExample, DatasetError> {
    if !entry.is_kept() {
        return Err(DatasetError::RejectedEntry(entry.entry_id.clone()));
    }
    Ok(ChatExample {
        id: entry.entry_id.clone(),
        origin: Origin::Domain,
        system: system_prompt.to_string(),
        user: entry.question.clone(),
        assistant: render_assistant(&entry.thinking, &entry.solution, &entry.answer),
    })
}

/// Token count of the example once tokenized.
pub fn tokenized_len(system: &str, user: &str, assistant: &str) -> usize {
    let system_block = if system.is_empty() {
        0
    } else {
        SYSTEM_DELIM.len() + system.len()
    };
    2 + system_block + USER_DELIM.len() + user.len() + ASSISTANT_DELIM.len() + assistant.len()
}

/// `BOS ‖ [SYSTEM_DELIM system] ‖ USER_DELIM user ‖ ASSISTANT_DELIM assistant ‖ EOS`,
/// with the mask true on the assistant bytes and the EOS.
pub fn tokenize_and_mask(example: &ChatExample, tokenizer: &ByteTokenizer) -> TokenizedExample {
    let mut prompt = String::new();
    if !example.system.is_empty() {
        prompt.push_str(SYSTEM_DELIM);
        prompt.push_str(&example.system);
    }
    prompt.push_str(USER_DELIM);
    prompt.push_str(&example.user);
    prompt.push_str(ASSISTANT_DELIM);

    let mut input_ids = Vec::with_capacity(tokenized_len(&example.system, &example.user, &example.assistant));
    input_ids.push(BOS);
    input_ids.extend(tokenizer.encode_str(&prompt));
    let n_prompt = input_ids.len();
    input_ids.extend(tokenizer.encode_str(&example.assistant));
    input_ids.push(EOS);

    let mut loss_mask = vec![false; input_ids.len()];
    loss_mask[n_prompt..].fill(true);
    TokenizedExample { input_ids, loss_mask }
}

/// Raw text for continual pretraining: `BOS ‖ text ‖ EOS`, mask all true.
/// Position 0 is never a prediction target, so its mask bit is inert.
pub fn tokenize_cpt(record: &CptRecord, tokenizer: &ByteTokenizer) -> TokenizedExample {
    let mut input_ids = Vec::with_capacity(record.text.len() + 2);
    input_ids.push(BOS);
    input_ids.extend(tokenizer.encode_str(&record.text));
    input_ids.push(EOS);
    let loss_mask = vec![true; input_ids.len()];
    TokenizedExample { input_ids, loss_mask }
}

fn floor_char_boundary(s: &str, mut i: usize) -> usize {
    if i >= s.len() {
        return s.len();
    }
    while !s.is_char_boundary(i) {
        i -= 1;
    }
    i
}

/// Shrink a kept entry until its rendered example fits in `max_len` tokens:
/// the solution is cut from its end first, then the thinking from its tail.
/// Question and answer are never touched.
pub fn truncate_entry(entry: &QtsaEntry, system_prompt: &str, max_len: usize) -> Result<QtsaEntry, DatasetError> {
    let len_of = |e: &QtsaEntry| {
        tokenized_len(
            system_prompt,
            &e.question,
            &render_assistant(&e.thinking, &e.solution, &e.answer),
        )
    };
    let mut out = entry.clone();
    let mut len = len_of(&out);
    if len <= max_len {
        return Ok(out);
    }
    let excess = len - max_len;
    let keep = floor_char_boundary(&out.solution, out.solution.len().saturating_sub(excess));
    out.solution.truncate(keep);
    len = len_of(&out);
    if len > max_len {
        let excess = len - max_len;
        let keep = floor_char_boundary(&out.thinking, out.thinking.len().saturating_sub(excess));
        out.thinking.truncate(keep);
        len = len_of(&out);
    }
    if len > max_len {
        return Err(DatasetError::OversizedExample {
            id: entry.entry_id.clone(),
            len,
            max_len,
        });
    }
    log::debug!("truncated {} to {len} tokens", entry.entry_id);
    Ok(out)
}

/// Render every kept entry (rejected ones are skipped), truncating to fit.
pub fn build_domain_examples(
    entries: &[QtsaEntry],
    system_prompt: &str,
    max_len: usize,
) -> Result<Vec<ChatExample>, DatasetError> {
    entries
        .iter()
        .filter(|e| e.is_kept())
        .map(|e| render_chat_template(&truncate_entry(e, system_prompt, max_len)?, system_prompt))
        .collect()
}

/// All of `domain` plus `min(|general|, round(ratio·|domain|))` general
/// examples drawn without replacement, shuffled together. Deterministic
/// per seed.
pub fn mix_datasets<T: Clone>(domain: &[T], general: &[T], ratio: f64, seed: u64) -> Result<Vec<T>, DatasetError> {
    if !(ratio.is_finite() && ratio > 0.0) {
        return Err(DatasetError::InvalidRatio(ratio));
    }
    let n_general = ((ratio * domain.len() as f64).round() as usize).min(general.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, general.len(), n_general).into_vec();
    picked.sort_unstable();
    let mut out: Vec<T> = domain.to_vec();
    out.extend(picked.into_iter().map(|i| general[i].clone()));
    out.shuffle(&mut rng);
    Ok(out)
}
