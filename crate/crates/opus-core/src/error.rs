use thiserror::Error;

/// Errors surfaced by the opus library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite values: {0}")]
    NonFinite(String),

    #[error("layer mismatch: {0}")]
    LayerMismatch(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("run aborted at step {step}: {reason}")]
    Aborted { step: u64, reason: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
