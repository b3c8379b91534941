use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised anywhere in the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("subject {subject}: {message}")]
    Subject { subject: String, message: String },
    #[error("cohort error: {message} (subjects: {ids:?})")]
    Cohort { message: String, ids: Vec<String> },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("zero-variance column at ROI {roi} (subject {subject})")]
    ZeroVariance { subject: String, roi: usize },
    #[error("zero-norm row {index} ({what})")]
    ZeroNorm { what: String, index: usize },
    #[error("non-finite value at step {step}: {message}")]
    NonFinite { step: usize, message: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("text provider error: {0}")]
    Provider(String),
    #[error("{0}")]
    Undefined(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
