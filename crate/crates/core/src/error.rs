use std::path::PathBuf;

use thiserror::Error;

/// Broad failure classes; the CLI maps each to its own exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("coil sensitivity C^H C is not invertible at {} support voxel(s), first {:?}", .voxels.len(), .voxels.first())]
    CoilSupport { voxels: Vec<(usize, usize)> },

    #[error("SVD failed: {0}")]
    Svd(String),

    #[error("solver diverged at iteration {iteration} (relative update {update:.3e})")]
    Divergence {
        iteration: usize,
        update: f64,
        state: Box<ndarray::Array3<num_complex::Complex64>>,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("external denoiser failed: {0}")]
    External(String),

    #[error("container {path}: {reason}")]
    Container { path: PathBuf, reason: String },

    #[error("malformed container: {0}")]
    Format(String),

    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidParameter(_) => ErrorClass::Config,
            Error::Container { .. }
            | Error::Format(_)
            | Error::Io { .. }
            | Error::Json(_)
            | Error::Shape { .. }
            | Error::External(_) => ErrorClass::Data,
            Error::NonFinite { .. }
            | Error::CoilSupport { .. }
            | Error::Svd(_)
            | Error::Divergence { .. }
            | Error::Numerical(_) => ErrorClass::Numerical,
        }
    }

    pub(crate) fn shape(context: impl Into<String>, expected: &[usize], found: &[usize]) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_vec(),
            found: found.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
