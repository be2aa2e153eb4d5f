use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("group level `{0}` is missing from the predictions")]
    MissingGroup(String),

    #[error("rate {rate} undefined for group `{group}` (no {denominator} samples)")]
    UndefinedRate {
        group: String,
        rate: &'static str,
        denominator: &'static str,
    },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("single-class input: {0}")]
    SingleClass(&'static str),

    #[error("zero-norm input: {0}")]
    ZeroNorm(&'static str),

    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },

    #[error("missing columns {missing:?} in {path}")]
    MissingColumns { path: PathBuf, missing: Vec<String> },

    #[error("image for `{id}` not found at {path}")]
    MissingImage { id: String, path: PathBuf },

    #[error("sample `{0}` has no lesion mask")]
    MissingMask(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    NonFiniteLoss { epoch: usize, step: usize, loss: f64 },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable snake_case tag for machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Empty(_) => "empty",
            Error::LengthMismatch(_) => "length_mismatch",
            Error::Shape { .. } => "shape",
            Error::MissingGroup(_) => "missing_group",
            Error::UndefinedRate { .. } => "undefined_rate",
            Error::InvalidValue(_) => "invalid_value",
            Error::SingleClass(_) => "single_class",
            Error::ZeroNorm(_) => "zero_norm",
            Error::Unknown { .. } => "unknown",
            Error::MissingColumns { .. } => "missing_columns",
            Error::MissingImage { .. } => "missing_image",
            Error::MissingMask(_) => "missing_mask",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Image(_) => "image",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidValue(msg.into())
    }
}
