use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// The requested privacy budget cannot be met.
    #[error("infeasible privacy budget: {0}")]
    Infeasible(String),

    #[error("bisection did not converge: {0}")]
    NoConvergence(String),

    /// Noise configured for an aggregate does not match the tensor's sensitivity.
    #[error("sensitivity mismatch: noise calibrated for {expected}, tensor requires {actual}")]
    SensitivityMismatch { expected: f64, actual: f64 },

    #[error("parameter group `{0}` is frozen")]
    Frozen(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("idx magic mismatch: expected {expected:#010x}, found {found:#010x}")]
    IdxMagic { expected: u32, found: u32 },

    #[error("idx payload truncated: expected {expected} bytes, found {found}")]
    IdxTruncated { expected: usize, found: usize },

    #[error("idx count mismatch: {images} images but {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error("privacy budget exhausted: achieved epsilon {achieved} exceeds target {target}")]
    BudgetExhausted { achieved: f64, target: f64 },

    #[error("empty input: {0}")]
    Empty(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
