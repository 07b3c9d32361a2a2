//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("unknown fairness metric: {0}")]
    UnknownMetric(String),

    #[error("no group has any samples in the conditioning subset")]
    AllGroupsEmpty,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("noise calibration failed: {0}")]
    Calibration(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error("missing data: {0}")]
    MissingData(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
