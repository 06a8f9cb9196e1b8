use std::path::PathBuf;

use thiserror::Error;

use crate::tensor_store::CompatibilityReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: not a TPAK file")]
    BadMagic,

    #[error("unsupported TPAK version {0}")]
    UnsupportedVersion(u32),

    #[error("unsupported dtype {0:?} for tensor {1:?}")]
    UnsupportedDtype(String, String),

    #[error("payload length mismatch: {0}")]
    PayloadLengthMismatch(String),

    #[error("malformed TPAK header: {0}")]
    MalformedHeader(String),

    #[error("non-finite value in tensor {0:?}")]
    NonFinite(String),

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("incompatible tensor maps: {0}")]
    Incompatible(Box<CompatibilityReport>),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("gap in snapshot indices for run {run_id:?}: expected 1..={expected}, found {found:?}")]
    SnapshotGap {
        run_id: String,
        expected: u32,
        found: Vec<u32>,
    },

    #[error("duplicate run_id {0:?}")]
    DuplicateRun(String),

    #[error("unknown run_id {0:?}")]
    UnknownRun(String),

    #[error("unknown snapshot {index} for run {run_id:?}")]
    UnknownSnapshot { run_id: String, index: u32 },

    #[error("duplicate score record ({0})")]
    DuplicateScore(String),

    #[error("invalid score record: {0}")]
    InvalidScore(String),

    #[error("invalid split identifier {0:?}")]
    InvalidSplit(String),

    #[error("missing score: {0}")]
    MissingScore(String),

    #[error("missing weights: {0}")]
    MissingWeights(String),

    #[error("unscorable composite: {0}")]
    UnscorableComposite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("external evaluator failed: {0}")]
    External(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
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
