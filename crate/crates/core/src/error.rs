use std::path::PathBuf;

use thiserror::Error;

/// Errors raised while building or querying the in-memory data model.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("id out of range: {what} = {value}, limit {limit}")]
    OutOfRange {
        what: &'static str,
        value: u64,
        limit: u64,
    },
    #[error("duplicate impression cell (brand {brand}, position {position}, day {day})")]
    DuplicateCell { brand: u32, position: u32, day: u32 },
    #[error("impression count must be positive in sparse storage")]
    ZeroCount,
    #[error("dimension must be at least 1: {0}")]
    EmptyDimension(&'static str),
    #[error("non-finite or negative value in {0}")]
    InvalidValue(&'static str),
    #[error(
        "kept coalition contains ({position}, {day}) which has no impressions for brand {brand}"
    )]
    KeptNotSubset { brand: u32, position: u32, day: u32 },
}

/// Errors raised by response models.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },
    #[error("training data must contain both positive and negative labels")]
    DegenerateLabels,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
}

/// Errors raised by Shapley credit allocation.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapleyError {
    #[error("exact enumeration of {tuples} tuples needs 2^{tuples} evaluations, above the budget of {budget}")]
    CoalitionOverflow { tuples: usize, budget: u64 },
    #[error("allocation is degenerate: credits sum to zero while delta = {delta}")]
    DegenerateAllocation { delta: f64 },
    #[error("invalid shapley configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Errors raised by file ingestion and emission.
#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{path}:{line}: duplicate key {key}")]
    DuplicateKey {
        path: PathBuf,
        line: u64,
        key: String,
    },
    #[error("{path}:{line}: negative count {value}")]
    NegativeCount {
        path: PathBuf,
        line: u64,
        value: i64,
    },
    #[error("{path}:{line}: count {value} does not fit in 32 bits")]
    CountOverflow {
        path: PathBuf,
        line: u64,
        value: i64,
    },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("missing data (strict mode): {0}")]
    Missing(String),
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
}

impl IngestError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IngestError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: u64, message: impl Into<String>) -> Self {
        IngestError::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}

/// Errors raised by the attribution pipeline.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Shapley(#[from] ShapleyError),
    #[error("invalid job: {0}")]
    InvalidJob(String),
}
