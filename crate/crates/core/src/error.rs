use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("malformed file {path}: {message}")]
    Malformed { path: PathBuf, message: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite entry in subject {subject}, modality {modality} at ({row}, {col})")]
    NonFinite {
        subject: String,
        modality: String,
        row: usize,
        col: usize,
    },

    #[error("subject {subject}, modality {modality}: asymmetry {max_diff:e} exceeds tolerance")]
    Asymmetric {
        subject: String,
        modality: String,
        max_diff: f64,
    },

    #[error("subject {subject}: label {label} is not 0 or 1")]
    InvalidLabel { subject: String, label: i64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty subject subset")]
    EmptySubset,

    #[error("single-class input: {0}")]
    SingleClass(String),

    #[error("numerical failure at iteration {iteration}: loss = {loss}")]
    NumericalFailure { iteration: usize, loss: f64 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the optimizer rather than by inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NumericalFailure { .. })
    }
}
