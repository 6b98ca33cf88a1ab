use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate variance in batchnorm: need at least 2 values per channel in training mode, got {0}")]
    DegenerateVariance(usize),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("format error in {field}: {detail}")]
    Format { field: String, detail: String },

    #[error("unsupported sample rate {rate} Hz (supported: 44100, 32000)")]
    UnsupportedRate { rate: u32 },

    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("unknown feature mask `{0}` (valid: all, age_gender, all_specs, impd_sensit, freq_responses)")]
    UnknownMask(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format { field: field.into(), detail: detail.into() }
    }
}
