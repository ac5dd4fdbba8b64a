use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// A loaded record breaks a data invariant. `id` names the offending record.
    #[error("invalid record `{id}`: {message}")]
    Invariant { id: String, message: String },

    #[error("unknown {kind} id `{id}`")]
    UnknownId { kind: &'static str, id: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("cannot draw {needed} negatives from a pool of {available}")]
    Sampling { needed: usize, available: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("AUC is undefined for an empty set of ranks")]
    UndefinedAuc,

    #[error("evaluation protocol error: {0}")]
    Protocol(String),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("generator: {0}")]
    Generation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension { context, expected, got }
    }
}
