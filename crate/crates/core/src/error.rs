//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("invalid token id {id} (vocabulary size {vocab_size})")]
    InvalidTokenId { id: usize, vocab_size: usize },
    #[error("message length {got} does not match model configuration {expected}")]
    MessageLengthMismatch { got: usize, expected: usize },
    #[error("sequence length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("width mismatch: {left} vs {right}")]
    WidthMismatch { left: usize, right: usize },
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("model has not been trained")]
    UntrainedModel,
    #[error("invalid bit string: {0}")]
    InvalidBitString(String),
    #[error("synonym table missing")]
    MissingSynonymTable,
    #[error("class imbalance beyond 10:1 ({positives} vs {negatives})")]
    ClassImbalance { positives: usize, negatives: usize },
    #[error("training diverged at epoch {epoch}, batch {batch}: L_S={semantic_loss}, L_M={message_loss}")]
    Diverged {
        epoch: usize,
        batch: usize,
        semantic_loss: f64,
        message_loss: f64,
    },
    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),
    #[error("checkpoint version {found} unsupported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
