use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record: {0}")]
    MalformedRecord(String),

    #[error("malformed manifest (line {line}): {reason}")]
    MalformedManifest { line: usize, reason: String },

    #[error("no beats detected: {0}")]
    NoBeatsDetected(String),

    #[error("report text is empty")]
    EmptyReport,

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("unknown token id {0}")]
    UnknownId(u32),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("sequence of {len} tokens exceeds max_text_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("batch mismatch: {0} ecg embeddings vs {1} text embeddings")]
    BatchMismatch(usize, usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("incompatible checkpoint: {0}")]
    IncompatibleVersion(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("vector {index} has norm {norm}, expected 1")]
    NormViolation { index: usize, norm: f64 },

    #[error("index is empty")]
    EmptyIndex,

    #[error("label set is empty")]
    EmptyLabelSet,

    #[error("no reports given")]
    EmptyReports,

    #[error("every taxonomy label is already present in the report")]
    NoAbsentLabels,

    #[error("candidate is empty")]
    EmptyCandidate,

    #[error("length mismatch: {0} predictions vs {1} references")]
    LengthMismatch(usize, usize),

    #[error("narrative backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("narrative backend returned a malformed response: {0}")]
    BackendMalformedResponse(String),

    #[error("json error: {0}")]
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

pub type Result<T, E = Error> = std::result::Result<T, E>;
