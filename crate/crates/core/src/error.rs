use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("class index {value} at line {line} must be at least 1")]
    ClassIndex { line: u64, value: i64 },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("empty document: no tokens remain after padding is removed")]
    EmptyDocument,

    #[error("vocabulary index {index} out of range for vocabulary of size {size}")]
    Vocabulary { index: usize, size: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("degenerate batch: channel has zero elements")]
    DegenerateBatch,

    #[error("backward already ran on this tape; call zero_grad before running it again")]
    BackwardTwice,

    #[error("backward must start from a single-element tensor, got shape {0:?}")]
    NonScalarBackward(Vec<usize>),

    #[error("non-finite values in gradient of `{tensor}`")]
    NonFinite { tensor: String },

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("file truncated while reading {0}")]
    Truncated(&'static str),

    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("unknown render format `{0}`")]
    UnknownFormat(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
