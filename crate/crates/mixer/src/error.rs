//! Crate-wide error type.

use crate::tensor::Shape;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in `{op}`: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },

    #[error("backward requires a scalar root, got {shape:?}")]
    NonScalarRoot { shape: Shape },

    #[error("integration blew up at time index {time_index}")]
    IntegrationBlowUp { time_index: usize },

    #[error("adaptive step size underflow at t = {t}")]
    StepSizeUnderflow { t: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset format: {0}")]
    DataFormat(String),

    #[error("dataset schema version {found} unsupported (expected {expected})")]
    DataVersion { found: u32, expected: u32 },

    #[error("dataset truncated: {0}")]
    DataTruncated(String),

    #[error("metric undefined: {0}")]
    EmptyMetric(String),

    #[error("training aborted at outer iteration {outer_iter}: {reason}")]
    TrainingAborted { outer_iter: usize, reason: String },

    #[error("data generation failed for family `{family}`: {reason}")]
    Generation { family: String, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
