//! Error types shared by every module in the crate.

use alloc::string::String;
use core::fmt;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, Error>;

/// Errors produced by model construction, evaluation, and training.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Invalid configuration (dimensions, hyperparameters, generator setup).
    Config(String),
    /// Tensor or parameter shape mismatch.
    Shape(String),
    /// Value outside the mathematical domain of an operation.
    Domain(String),
    /// Invalid input data (labels, templates, empty collections, ...).
    Validation(String),
    /// A lookup key was not found; carries the missing key.
    NotFound(String),
    /// Operation requires state that is not present (e.g. untrained model).
    State(String),
    /// Training produced a non-finite loss at the given epoch.
    TrainingDiverged { epoch: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::Validation(msg) => write!(f, "validation error: {msg}"),
            Error::NotFound(key) => write!(f, "not found: {key}"),
            Error::State(msg) => write!(f, "state error: {msg}"),
            Error::TrainingDiverged { epoch } => {
                write!(f, "training diverged: non-finite loss at epoch {epoch}")
            }
        }
    }
}

impl core::error::Error for Error {}
