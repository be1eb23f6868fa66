use thiserror::Error;

use crate::fields::Shape;

#[derive(Debug, Error)]
pub enum SonicError {
    #[error("invalid shape {0}: every dimension must be at least 1")]
    InvalidShape(Shape),

    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: Shape,
        got: Shape,
    },

    #[error("data length {got} does not match shape {shape}")]
    LengthMismatch { shape: Shape, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("time {value} outside {range}")]
    InvalidTime { value: f64, range: &'static str },

    #[error("unknown class id {id} (model has {classes} classes)")]
    UnknownClass { id: u32, classes: usize },

    #[error("spectrum is not Hermitian (max deviation {0:e})")]
    NonHermitian(f64),

    #[error("mask has no observed pixel")]
    NoObservedPixels,

    #[error("empty evaluation region")]
    EmptyRegion,

    #[error("invalid config `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("diverged at {stage} step {step}: {detail}")]
    Diverged {
        stage: &'static str,
        step: usize,
        detail: String,
    },

    #[error("seed optimization aborted after {} recorded iterations: {source}", trace.records.len())]
    SeedOptAborted {
        source: Box<SonicError>,
        trace: Box<crate::seedopt::OptTrace>,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SonicError {
    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        SonicError::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    /// Short machine-readable category name, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            SonicError::InvalidShape(_) => "invalid_shape",
            SonicError::ShapeMismatch { .. } | SonicError::LengthMismatch { .. } => {
                "shape_mismatch"
            }
            SonicError::NonFinite(_) => "non_finite",
            SonicError::InvalidTime { .. } => "invalid_time",
            SonicError::UnknownClass { .. } => "unknown_class",
            SonicError::NonHermitian(_) => "non_hermitian",
            SonicError::NoObservedPixels => "no_observed_pixels",
            SonicError::EmptyRegion => "empty_region",
            SonicError::Config { .. } => "config",
            SonicError::Diverged { .. } => "diverged",
            SonicError::SeedOptAborted { source, .. } => source.kind(),
            SonicError::Format(_) => "format",
            SonicError::Io(_) => "io",
            SonicError::Json(_) => "json",
        }
    }
}

pub type Result<T, E = SonicError> = std::result::Result<T, E>;
