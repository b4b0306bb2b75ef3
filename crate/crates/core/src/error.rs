use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("architecture mismatch between models")]
    ArchMismatch,
    #[error("split leaves the HQ subset empty (n = {n}, hq_ratio = {ratio})")]
    EmptyHq { n: usize, ratio: f64 },
    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("training diverged at step {step}: non-finite loss on batch [{ids}]")]
    Diverged { step: usize, ids: String },
    #[error("runs are not comparable: {0}")]
    InconsistentRuns(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
