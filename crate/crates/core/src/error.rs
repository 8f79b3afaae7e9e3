use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
///
/// Variants are grouped by the way a caller usually reacts to them: bad
/// settings, bad input data or files, and numeric failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("input of length {len} exceeds the maximum of {max}")]
    Length { len: usize, max: usize },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("format error in {path}: expected magic {expected:?}, found {found:?}")]
    Magic {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("model state error: {0}")]
    ModelState(String),

    #[error("gradient check failed: {failed} of {checked} coordinates exceed tolerance {tolerance:e} (worst {worst_param}: rel. error {worst_error:e})")]
    GradientCheck {
        failed: usize,
        checked: usize,
        tolerance: f64,
        worst_param: String,
        worst_error: f64,
    },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("session error: {0}")]
    Session(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
