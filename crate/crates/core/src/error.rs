use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: duplicate entry `{term}`")]
    DuplicateEntry { line: usize, term: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("name `{0}` is listed as both male and female")]
    GazetteerOverlap(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("normalized bias score undefined: baseline has zero mismatches")]
    ZeroBaseline,

    #[error("bias percentage undefined: no pairs")]
    EmptyCount,

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the filesystem rather than of the data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
