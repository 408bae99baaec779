//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by loading, inference, training, and checkpointing.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at {path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("coupling layers need an even input dimension, got {0}")]
    OddDimension(usize),

    #[error("unknown token {token:?} (sentence {sentence})")]
    UnknownToken { token: String, sentence: usize },

    #[error("sentence {sentence}: head {head} out of range for length {len}")]
    HeadOutOfRange { sentence: usize, head: usize, len: usize },

    #[error("sentence {sentence}: malformed dependency tree: {msg}")]
    MalformedTree { sentence: usize, msg: String },

    #[error("corpus is empty{0}")]
    EmptyCorpus(&'static str),

    #[error("impossible observation: token {token} has no admissible state")]
    ImpossibleObservation { token: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("model structure mismatch: expected {expected}, found {found}")]
    StructureMismatch {
        expected: &'static str,
        found: &'static str,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(path: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), line, msg: msg.into() }
    }
}
