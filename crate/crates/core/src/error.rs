//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value (bad widths, out-of-range index, missing preset field...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor shape does not satisfy an operation's contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// Input data violates a precondition (non-finite values, non-binary mask...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Wrong number of arguments to a fixed-arity operation.
    #[error("arity error: {0}")]
    Arity(String),

    /// Dataset ingestion failure (orphan files, unreadable images...).
    #[error("ingestion error: {0}")]
    Ingestion(String),

    /// Checkpoint or weights archive could not be read or does not match the model.
    #[error("load error: {0}")]
    Load(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: u64, detail: String },

    #[error("storage error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
