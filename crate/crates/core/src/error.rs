use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: line {line}: {message}")]
    MalformedRow { path: PathBuf, line: u64, message: String },

    #[error("duplicate id {0}")]
    DuplicateId(String),

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("unresolvable supervision ids: {}", .0.join("; "))]
    UnresolvedIds(Vec<String>),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("cannot sample negative: {0}")]
    CannotSample(String),

    #[error("unknown document id {0}")]
    UnknownDocument(String),

    #[error("missing key column {0}")]
    MissingKeyColumn(String),

    #[error("training diverged: {0}")]
    NonFiniteLoss(String),

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("chain stage {stage}: {message}")]
    BrokenChain { stage: usize, message: String },

    #[error("missing input file {}", .0.display())]
    MissingInput(PathBuf),

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Validation errors are problems with the user's inputs; everything else
    /// is a failure while running.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::NonFiniteLoss(_) | Error::Io { .. } | Error::Csv(_))
    }
}
