use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: output size is not integral ({detail})")]
    NonIntegralOutput { op: &'static str, detail: String },

    #[error("invalid argument `{field}`: {detail}")]
    InvalidArgument { field: &'static str, detail: String },

    #[error("label {label} at pixel {index} is outside [0, {num_classes}) and not the ignore id")]
    LabelOutOfRange {
        label: u8,
        index: usize,
        num_classes: usize,
    },

    #[error("invalid channel mask: {0}")]
    InvalidMask(String),

    #[error("mask coverage unachievable: {0}")]
    CoverageUnachievable(String),

    #[error("invalid session state: {0}")]
    InvalidState(String),

    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("bad CWMT container: {0}")]
    Format(String),

    #[error("weights do not match spec at layer `{layer}`: {detail}")]
    WeightMismatch { layer: String, detail: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("degenerate timing: {0}")]
    DegenerateTiming(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(field: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            field,
            detail: detail.into(),
        }
    }

    pub(crate) fn in_file(self, path: impl Into<PathBuf>) -> Self {
        Error::File {
            path: path.into(),
            source: Box::new(self),
        }
    }
}
