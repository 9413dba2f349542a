//! A small byte-level decoder-only transformer with exact f64 gradients.
//!
//! The model is the trainable distribution `p_θ`; a [`FrozenParameters`]
//! snapshot of it serves as the KL reference.

mod checkpoint;
mod decode;
pub mod gradcheck;
mod model;
mod params;
mod tokenizer;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, CHECKPOINT_VERSION};
pub use decode::greedy_decode;
pub use model::{backward, forward, value_and_grad, ForwardOutput, LossGrad};
pub use params::{
    freeze_reference, BlockKind, FrozenParameters, LayerLayout, Layout, ModelConfig, Parameters,
};
pub use tokenizer::{ByteTokenizer, TokenId, BOS, EOS, PAD, VOCAB_SIZE};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of length {len} exceeds the context window of {window}")]
    ContextOverflow { len: usize, window: usize },
    #[error("token id {0} is outside the vocabulary")]
    InvalidToken(TokenId),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("parameter {0} is not finite")]
    NonFiniteParameter(usize),
    #[error("loss evaluated to a non-finite value ({0})")]
    NonFiniteLoss(f64),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
}
