use std::path::{Path, PathBuf};

use thiserror::Error;

/// Unified error type for the crate.
///
/// The CLI maps variants onto process exit codes via [`Error::exit_code`]:
/// bad configuration or malformed input data is 1, runtime divergence
/// (non-finite state) is 2, and I/O failures are 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("power profile undefined at t = {t} s; covered range is [{start}, {end}] s")]
    ProfileRange { t: f64, start: f64, end: f64 },

    #[error("malformed CSV input: {0}")]
    Csv(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    /// Process exit code contract: 0 success, 1 config error, 2 runtime
    /// divergence, 3 I/O error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Dimension { .. } | Error::Degenerate(_) | Error::Csv(_) => 1,
            Error::NonFinite(_) | Error::ProfileRange { .. } => 2,
            Error::Io { .. } => 3,
        }
    }
}
