use std::path::PathBuf;

use crate::parsing::ConsistencyVerdict;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    DimensionMismatch { op: &'static str, detail: String },

    #[error("{0}: empty input")]
    EmptyInput(&'static str),

    #[error("zero vector: {0}")]
    ZeroVector(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("backward requires a 1x1 loss, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic bytes (expected TEF1)")]
    BadMagic,

    #[error("unsupported container version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("corrupt record: {0}")]
    CorruptRecord(String),

    #[error("summary provider failed: {0}")]
    ProviderFailure(String),

    #[error("summary refinement exhausted after {attempts} attempts")]
    RefinementExhausted {
        attempts: usize,
        last_summary: String,
        verdict: ConsistencyVerdict,
    },

    #[error("batch is empty")]
    BatchEmpty,

    #[error("dataset is empty")]
    DataEmpty,

    #[error("triplet {id}: {source}")]
    Triplet {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint config mismatch: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("conflicting flags: {0}")]
    ConflictingFlags(String),

    #[error("duplicate id {0}")]
    DuplicateId(String),

    #[error("no candidates left after exclusion")]
    EmptyAfterExclusion,

    #[error("query {0}: subset members missing or do not contain the target")]
    SubsetMissingTarget(String),

    #[error("fashion-style report requires categories; query {0} has none")]
    MissingCategory(String),

    #[error("no queries to evaluate")]
    EmptyEvaluation,

    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: schema error in field `{field}`: {message}")]
    Schema {
        line: usize,
        field: String,
        message: String,
    },

    #[error("dataset has no records")]
    EmptyDataset,

    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dims(op: &'static str, detail: impl Into<String>) -> Self {
        Error::DimensionMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
