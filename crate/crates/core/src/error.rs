use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("empty batch")]
    EmptyBatch,

    #[error("non-finite value in layer {layer}")]
    NonFinite { layer: usize },

    #[error("invalid rank {rank}: must satisfy 1 <= r <= min({d}, {l})")]
    InvalidRank { rank: usize, d: usize, l: usize },

    #[error("mixing weight {0} outside [0, 1]")]
    InvalidAlpha(f64),

    #[error("invalid configuration `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("Rest-of-World adapter is undefined for K = {0} clients (need K >= 2)")]
    RowUndefined(usize),

    #[error("missing upload from client {0}")]
    MissingUpload(usize),

    #[error("payload rejected: {0}")]
    Payload(String),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("client {client} failed in round {round}: {source}")]
    Client {
        client: usize,
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{0}")]
    Diagnostics(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Dimension {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }
}
