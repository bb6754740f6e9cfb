use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("clip of {samples} samples is shorter than one analysis window of {window}")]
    ClipTooShort { samples: usize, window: usize },

    #[error("input contains non-finite values")]
    NonFinite,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("label sequence of length {labels} (needs {required} frames) cannot be aligned to {frames} frames")]
    Unalignable {
        labels: usize,
        required: usize,
        frames: usize,
    },

    #[error("embedding has zero norm")]
    ZeroNorm,

    #[error("index {index} out of range for {len} classes")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("scores have zero spread; cannot calibrate")]
    ZeroSpread,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }

    /// Process exit code for this error: 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => 1,
            Error::Numerical(_) | Error::NonFinite => 3,
            _ => 2,
        }
    }
}
