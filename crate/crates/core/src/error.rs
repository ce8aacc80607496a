use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("batchnorm2d: train mode needs at least 2 elements per channel, got {0}")]
    DegenerateVariance(usize),

    #[error("variable is not recorded on this tape")]
    NotOnTape,

    #[error("tape already consumed by a backward pass; record a new graph first")]
    TapeConsumed,

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("invalid network spec: {0}")]
    Spec(String),

    #[error("singular system: X·Xᵀ is not positive definite; use lambda_ii > 0")]
    Singular,

    #[error("non-finite loss at step {step}: {breakdown}")]
    NonFinite { step: usize, breakdown: String },

    #[error("dimension mismatch at {boundary}: expected {expected}, got {got}")]
    Boundary {
        boundary: &'static str,
        expected: usize,
        got: usize,
    },

    #[error(transparent)]
    Checkpoint(#[from] crate::io::FormatError),

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("{path}: {msg}")]
    Data { path: PathBuf, msg: String },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: &[usize], got: &[usize]) -> Self {
        Error::Shape {
            op,
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument { op, msg: msg.into() }
    }

    /// True for failures caused by numerical blow-up rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }
}
