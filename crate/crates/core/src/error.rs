use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors produced anywhere in the localization stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid coordinate: {0}")]
    InvalidCoordinate(String),

    #[error("empty selection: {0}")]
    EmptySelection(&'static str),

    #[error("degenerate vector (norm {norm:e})")]
    DegenerateVector { norm: f64 },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("duplicate record id `{0}`")]
    DuplicateId(String),

    #[error("retrieval failed: {0}")]
    Retrieval(String),

    #[error("payoff x'Ax is zero; replicator step undefined")]
    ZeroPayoff,

    #[error("affinity matrix has no edges")]
    NoEdges,

    #[error("scale limit exceeded: {0}")]
    Scale(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by problem size rather than bad data.
    pub fn is_scale(&self) -> bool {
        matches!(self, Error::Scale(_))
    }
}
