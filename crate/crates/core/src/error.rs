use std::path::Path;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}, line {line}: {message}")]
    Ingest {
        file: String,
        line: usize,
        message: String,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid task: {0}")]
    InvalidTask(String),

    #[error("invalid pool: {0}")]
    InvalidPool(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("missing field {field:?} in example {example:?}")]
    MissingField { example: String, field: String },

    #[error("missing label: {0}")]
    MissingLabel(String),

    #[error("service error: {0}")]
    Service(String),

    #[error("malformed service response: {0}")]
    BadResponse(String),

    #[error("empty input: {0}")]
    Empty(String),
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
