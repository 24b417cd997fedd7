use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the segmentation stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected \"EASETNSR\", found {found:?}")]
    BadMagic { found: [u8; 8] },

    #[error("unsupported tensor file version {0}")]
    UnsupportedVersion(u32),

    #[error("unknown dtype code {0}")]
    UnknownDtype(u32),

    #[error("dtype mismatch: expected {expected}, found {found}")]
    DtypeMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error("truncated payload: header declares {expected} bytes, {available} available")]
    TruncatedPayload { expected: u64, available: u64 },

    #[error("{0} trailing bytes after payload")]
    TrailingBytes(u64),

    #[error("truncated header")]
    TruncatedHeader,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("Calinski-Harabasz index undefined for K={k}, n={n}")]
    Undefined { k: usize, n: usize },

    #[error("granularity not computed for K={0} (requires K > 2)")]
    NotComputed(usize),

    #[error("calibration failed: {0}")]
    CalibrationFailed(String),

    #[error("boundary-penalty sweep failed: every candidate errored")]
    SweepFailed,

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for filesystem failures as opposed to malformed or inconsistent data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
