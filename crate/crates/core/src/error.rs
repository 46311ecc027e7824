use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("power iteration did not converge after {iterations} iterations (residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("index {index} out of range for {len} classes")]
    Index { index: usize, len: usize },

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("invalid dataset spec: {0}")]
    Spec(String),

    #[error("triplet sampler exhausted: {0}")]
    Exhausted(String),

    #[error("rejected batch: {0}")]
    RejectedBatch(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("parse error on line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// True for errors caused by numerics rather than bad inputs or files.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Convergence { .. } | Error::Numerical(_) | Error::Degenerate(_) | Error::NonFinite { .. }
        )
    }
}
