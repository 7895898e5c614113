use thiserror::Error;

/// Errors produced by the estimators, the dataset tooling and the training loops.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A landmark coincides with the agent, so the bearing is undefined.
    #[error("degenerate geometry: landmark {landmark} has zero range")]
    DegenerateGeometry { landmark: usize },

    #[error("filter diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },

    #[error("innovation covariance is ill-conditioned (condition estimate {condition:e}, cap {cap:e})")]
    IllConditioned { condition: f64, cap: f64 },

    #[error("training failed: {0}")]
    Training(String),

    #[error("format error in record {record}: {reason}")]
    Format { record: usize, reason: String },

    #[error("format version mismatch: expected {expected}, found {found}")]
    Version { expected: u32, found: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Attaches a time index to errors raised inside one filter step.
    pub fn at_step(self, step: usize) -> Self {
        match self {
            Error::Divergence { reason, .. } => Error::Divergence { step, reason },
            Error::DegenerateGeometry { landmark } => Error::Divergence {
                step,
                reason: format!("landmark {landmark} has zero range at the prior mean"),
            },
            Error::IllConditioned { condition, cap } => Error::Divergence {
                step,
                reason: format!("innovation covariance condition {condition:e} exceeds cap {cap:e}"),
            },
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
