use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point ({lng}, {lat}) lies outside the grid")]
    OutOfBounds { lng: f64, lat: f64 },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("dataset contains no orders")]
    EmptyDataset,
    #[error("no samples to fit")]
    EmptySamples,
    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("covariance matrix is not positive definite")]
    NonPositiveDefinite,
    #[error("decision references order {0}, which is not a candidate")]
    InvalidDecision(u64),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("unexpected header: {0}")]
    Schema(String),
    #[error("model file version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt model file: {0}")]
    CorruptFile(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// True for errors caused by the input data rather than by the caller.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Config(_) | Error::InvalidDecision(_))
    }
}
