use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("uninterpolatable series: every value is missing")]
    Uninterpolatable,

    #[error("series shorter than window: {len} < {window}")]
    SeriesShorterThanWindow { len: usize, window: usize },

    #[error("invalid series: {0}")]
    InvalidSeries(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {reason}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("{path}:{line}: record is missing key `{key}`")]
    MissingKey {
        path: PathBuf,
        line: usize,
        key: &'static str,
    },

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("duplicate record id ({domain}, {item_id})")]
    DuplicateRecord { domain: String, item_id: String },

    #[error("{path}: row {row}, column {column}: non-numeric cell {cell:?}")]
    NonNumericCell {
        path: PathBuf,
        row: usize,
        column: usize,
        cell: String,
    },

    #[error("csv error in {path}: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("k-means: {0}")]
    KMeans(String),

    #[error("window length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("window {0} is already indexed")]
    DuplicateWindow(String),

    #[error("tree file: {0}")]
    TreeFormat(String),

    #[error("no retrieved series")]
    NoRetrievedSeries,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("malformed model reply: expected {expected} numbers, found {found}")]
    MalformedReply { expected: usize, found: usize },

    #[error("model backend: {0}")]
    Backend(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
