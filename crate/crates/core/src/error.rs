use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the pipeline can surface. Variant names mirror the
/// error classes the CLI reports.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },
    #[error("unexpected header: {0}")]
    SchemaMismatch(String),
    #[error("timestamps regress in {regressions} of {rows} rows")]
    NonMonotonicTime { regressions: usize, rows: usize },
    #[error("recording has no frames")]
    EmptyRecording,
    #[error("invalid recording: {0}")]
    InvalidRecording(String),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("degenerate quaternion (norm {0:e})")]
    DegenerateQuaternion(f64),
    #[error("input too short: {0}")]
    TooShort(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by {0}")]
    NonFiniteValue(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("window of {len} frames exceeds positional table of {max}")]
    WindowTooLong { len: usize, max: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("class index {index} out of range for {classes} classes")]
    IndexOutOfRange { index: usize, classes: usize },
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("reference store is empty after filtering")]
    EmptyStore,
    #[error("insufficient span: {0}")]
    InsufficientSpan(String),
    #[error("roster of {0} users is too small")]
    RosterTooSmall(usize),
    #[error("recording too short for split: {0}")]
    RecordingTooShort(String),
    #[error("no windows available: {0}")]
    NoWindows(String),
    #[error("application missing from test data: {0}")]
    MissingApp(String),
    #[error("incomplete matrix: {0}")]
    IncompleteMatrix(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("window cache: {0}")]
    CorruptCache(String),
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        source: Box<Error>,
    },
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
}
