use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("io error: {0}")]
    RawIo(#[from] std::io::Error),

    #[error("no interactions in {0}")]
    NoInteractions(String),

    #[error("{malformed} of {total} rows malformed (limit is 1%)")]
    TooManyMalformed { malformed: usize, total: usize },

    #[error("dataset is empty after filtering")]
    EmptyDataset,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("item index {index} outside vocabulary of {item_count} items")]
    OutOfVocabulary { index: usize, item_count: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("shape mismatch for {name}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("logic error: {0}")]
    Logic(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("experiment arm {arm} failed: {reason}")]
    ArmFailed { arm: String, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
