use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the pairrank library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: missing required field `{field}`")]
    MissingField { line: usize, field: &'static str },

    #[error("line {line}: invalid value for `{field}`: {message}")]
    InvalidField {
        line: usize,
        field: &'static str,
        message: String,
    },

    #[error("duplicate passage id `{0}`")]
    DuplicateId(String),

    #[error("passage `{0}` has no raw vote counts")]
    MissingVotes(String),

    #[error("passage `{0}` has no timestamp")]
    MissingTimestamp(String),

    #[error("unknown passage id `{0}`")]
    UnknownPassage(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("pair ({first}, {second}) has tied ground-truth scores")]
    TiedPair { first: String, second: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("checkpoint: bad magic bytes")]
    BadMagic,

    #[error("checkpoint: unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("checkpoint: truncated ({0})")]
    Truncated(String),

    #[error("checkpoint: checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("unbalanced test set: {0}")]
    Unbalanced(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
