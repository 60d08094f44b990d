//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("cosine similarity undefined for zero-norm vector")]
    ZeroNorm,

    #[error("invalid quantized tensor: {0}")]
    InvalidQuantized(String),

    #[error("token id {id} out of range (vocab size {vocab})")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("block {0} is protected and cannot be removed")]
    ProtectedBlock(usize),

    #[error("block index {0} not present in model")]
    UnknownBlock(usize),

    #[error("removal would leave no transformer blocks")]
    DegenerateModel,

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("missing activation statistics for layer {0}")]
    MissingStats(String),

    #[error("channel scale must be strictly positive (layer {layer}, channel {channel})")]
    NonPositiveScale { layer: String, channel: usize },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("operation unsupported on quantized weights: {0}")]
    QuantizedUnsupported(String),

    #[error("checkpoint corrupt: {0}")]
    CorruptCheckpoint(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
