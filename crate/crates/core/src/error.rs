use thiserror::Error;

use crate::field::TrainOutcome;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("neighbor index is empty")]
    EmptyIndex,

    #[error("class missing: no {0} samples")]
    ClassMissing(&'static str),

    #[error("collision boundary not bracketed by segment endpoints")]
    NotBracketed,

    #[error("coincident configurations: distance to boundary is zero")]
    ZeroDistance,

    #[error("out of bounds: {0}")]
    OutOfBounds(String),

    #[error("degenerate (zero) gradient")]
    DegenerateGradient,

    #[error("value {value} outside range [{lo}, {hi}]")]
    Range { value: f64, lo: f64, hi: f64 },

    #[error("planning failed: {0}")]
    PlanningFailed(String),

    #[error("optimization error: {0}")]
    Optimization(String),

    #[error("training diverged at epoch {epoch}")]
    Diverged {
        epoch: usize,
        last_good: Box<TrainOutcome>,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("unsupported format version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },

    #[error("schema error: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
        if expected == got {
            Ok(())
        } else {
            Err(Error::DimensionMismatch { expected, got })
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Schema(e.to_string())
    }
}
