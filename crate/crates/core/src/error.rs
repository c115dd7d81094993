use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Wiring or hyperparameter problem: shapes, channel counts, axes.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller-supplied data does not satisfy an operation's precondition.
    #[error("input error: {0}")]
    Input(String),

    /// API misuse such as calling backward on a non-scalar.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric fault in `{layer}`: {detail}")]
    NumericFault { layer: String, detail: String },

    #[error("preprocessing error for modality {modality}: {detail}")]
    Preprocess { modality: String, detail: String },

    #[error("nifti: bad magic {found:?} in {path}")]
    NiftiBadMagic { path: PathBuf, found: [u8; 4] },

    #[error("nifti: unsupported datatype code {code} in {path}")]
    NiftiUnsupportedDtype { path: PathBuf, code: i16 },

    #[error("nifti: truncated payload in {path}: expected {expected} bytes, found {found}")]
    NiftiTruncated { path: PathBuf, expected: usize, found: usize },

    #[error("nifti: malformed header in {path}: {detail}")]
    NiftiHeader { path: PathBuf, detail: String },

    #[error("invalid label value {value} at voxel {index}")]
    InvalidLabel { value: i64, index: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
macro_rules! input_err {
    ($($arg:tt)*) => { $crate::error::Error::Input(format!($($arg)*)) };
}
macro_rules! contract_err {
    ($($arg:tt)*) => { $crate::error::Error::Contract(format!($($arg)*)) };
}
pub(crate) use {config_err, contract_err, input_err};
