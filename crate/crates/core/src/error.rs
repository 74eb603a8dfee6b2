use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or argument mismatch detected while dispatching an op.
    #[error("{op}: {message}")]
    Shape { op: &'static str, message: String },

    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("graph was released by an earlier backward pass; rebuild it to differentiate again")]
    GraphReleased,

    #[error("tensor has no graph node ({context})")]
    NoNode { context: &'static str },

    #[error("ledger scope error: {0}")]
    Scope(String),

    #[error("precision mismatch: {0}")]
    Precision(String),

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Dataset {
        path: String,
        line: usize,
        message: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
