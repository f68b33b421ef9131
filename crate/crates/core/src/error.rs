use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied parameter violates an operation's precondition.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A label or index lies outside its admissible range.
    #[error("value out of range: {0}")]
    Range(String),

    /// A VVOL stream could not be decoded.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Misuse of the differentiation tape (e.g. backward from a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A distance metric is undefined because one of the masks is empty.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// A phantom description yields degenerate geometry.
    #[error("invalid phantom spec: {0}")]
    Spec(String),

    #[error("training diverged at step {step}: non-finite loss")]
    Diverged { step: usize },
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
