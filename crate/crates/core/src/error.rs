use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("validation error on line {line}: {msg}")]
    Validation { line: usize, msg: String },

    #[error("no data: {0}")]
    EmptyData(&'static str),

    #[error("interval must be positive, got {0}")]
    NonPositiveInterval(f64),

    #[error("bad split fractions {0:?}")]
    BadFractions((f64, f64, f64)),

    #[error("accuracy must be positive, got {0}")]
    NonPositiveAccuracy(f64),

    #[error("index {index} out of range 1..={max}")]
    IndexOutOfRange { index: usize, max: usize },

    #[error("mark {mark} out of range for {num_marks} marks")]
    MarkOutOfRange { mark: usize, num_marks: usize },

    #[error("cross-covariance violates c'c < M: c'c = {norm_sq}, M = {num_marks}")]
    ConstraintViolated { norm_sq: f64, num_marks: usize },

    #[error("hawkes process is not stationary: {0}")]
    NonStationary(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
