//! The shared generator/retriever model, its vocabulary and checkpoints.

mod checkpoint;
mod transformer;
mod vocab;

pub use checkpoint::{content_id, write_atomic, Checkpoint, CHECKPOINT_VERSION};
pub use transformer::{
    cosine, reference_content, reference_sequence, Bound, Forward, ModelConfig, QueryEmbedding, RefEmbedding, ScholarLm,
};
pub use vocab::{
    is_terminator, key_token, tokenize, TokenId, Vocabulary, BOS, CITE_CLOSE, CITE_OPEN, EOS, PAD, REF_CLOSE, REF_OPEN,
    RET, SPECIALS, UNK,
};

use thiserror::Error;

use crate::nn::NnError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input of {len} tokens exceeds the context limit of {limit}")]
    ContextOverflow { len: usize, limit: usize },
    #[error("empty token sequence")]
    EmptyInput,
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: TokenId, vocab: usize },
    #[error("query sequence must end with the retrieval token")]
    NotRetTerminated,
    #[error("reference {0} has an empty title")]
    EmptyTitle(String),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),
    #[error("unsupported checkpoint version {0:?}")]
    UnknownVersion(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
