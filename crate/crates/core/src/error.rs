use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("no prototype for class {0}")]
    MissingPrototype(usize),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("failed to ingest {}: {reason}", path.display())]
    Ingestion { path: PathBuf, reason: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("non-finite loss during {context}: {breakdown}")]
    NonFinite { context: String, breakdown: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Wraps the error with round/client context, keeping the variant for
    /// the variants callers match on.
    pub fn context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            Error::NonFinite { context, breakdown } => Error::NonFinite {
                context: format!("{ctx}: {context}"),
                breakdown,
            },
            Error::Protocol(m) => Error::Protocol(format!("{ctx}: {m}")),
            Error::Generation(m) => Error::Generation(format!("{ctx}: {m}")),
            other => other,
        }
    }
}
