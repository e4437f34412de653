use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),
    #[error("invalid layer mask: {0}")]
    InvalidMask(String),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("degenerate gradient: {0}")]
    DegenerateGradient(String),
    #[error("ambiguous label: {0} rows with negative sum")]
    AmbiguousLabel(usize),
    #[error("no usable row: bias gradient is all zero")]
    NoUsableRow,
    #[error("layer has no bias parameter")]
    NoBias,
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
