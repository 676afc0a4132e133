use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("matrix is not positive definite (failing pivot {pivot}, value {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite objective at epoch {epoch}, batch {batch}: {what}")]
    Training {
        epoch: usize,
        batch: usize,
        what: String,
    },

    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Diverged {
        epoch: usize,
        batch: usize,
        trace: Box<crate::train::TrainTrace>,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("checkpoint schema version {found} is not supported (expected {expected})")]
    Schema { found: u32, expected: u32 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
