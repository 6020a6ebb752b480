use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, KamirError>;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum KamirError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate vector: {0} has zero Euclidean norm")]
    DegenerateVector(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate document id {id:?} on lines {first_line} and {second_line}")]
    DuplicateId {
        id: String,
        first_line: usize,
        second_line: usize,
    },

    #[error("stale manifest: {0}")]
    StaleManifest(String),

    #[error("sub-passage {index}: {source}")]
    SubPassage {
        index: usize,
        #[source]
        source: Box<KamirError>,
    },

    #[error("adapter already merged")]
    AdapterConsumed,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl KamirError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        KamirError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        KamirError::Format {
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        KamirError::InvalidInput(message.into())
    }

    /// True for failures that indicate a bug rather than bad input.
    pub fn is_invariant_violation(&self) -> bool {
        match self {
            KamirError::NonFinite(_) => true,
            KamirError::SubPassage { source, .. } => source.is_invariant_violation(),
            _ => false,
        }
    }
}
