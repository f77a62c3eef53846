//! Crate-wide error type.
//!
//! Every fallible public entry point returns [`Result`]. Shape violations
//! name both offending shapes so a failed contract is diagnosable from the
//! message alone.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor operation received operands whose shapes violate its
    /// contract. The message names the operation and both shapes.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Invalid model or run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Automatic differentiation misuse (backward on a non-scalar, a second
    /// backward on a consumed tape, and similar).
    #[error("autodiff error: {0}")]
    Autodiff(String),

    /// Routing failures: non-finite logits, k out of range.
    #[error("routing error: {0}")]
    Routing(String),

    /// Malformed serialized artifact (dataset, checkpoint, config, report).
    #[error("format error: {0}")]
    Format(String),

    /// Checkpoint does not match the model it is being loaded into.
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
