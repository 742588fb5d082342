use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible; both shapes are named.
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// An API contract was violated (scalar expected, label out of range, ...).
    #[error("contract violation: {context}")]
    Contract { context: String },

    /// A hyperparameter or spec field is outside its valid range.
    #[error("invalid parameter: {context}")]
    InvalidParameter { context: String },

    /// A config file failed to parse or failed validation.
    #[error("config error: {context}")]
    Config { context: String },

    /// File I/O failure, with the path that caused it.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A training failure wrapped with the step and epoch it occurred in.
    #[error("training failed at step {step}, epoch {epoch}: {source}")]
    Training {
        step: usize,
        epoch: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn contract(context: impl Into<String>) -> Self {
        Error::Contract { context: context.into() }
    }

    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite { context: context.into() }
    }

    pub(crate) fn invalid(context: impl Into<String>) -> Self {
        Error::InvalidParameter { context: context.into() }
    }

    pub(crate) fn config(context: impl Into<String>) -> Self {
        Error::Config { context: context.into() }
    }

    pub(crate) fn at_step(self, step: usize, epoch: usize) -> Self {
        Error::Training { step, epoch, source: Box::new(self) }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
