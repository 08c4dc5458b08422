//! Error taxonomy shared by the library and the CLI.
//!
//! Every fallible public operation returns [`Error`]. The CLI maps each
//! variant to a stable process exit code so scripts can branch on failure
//! class without parsing messages.

use thiserror::Error;

/// Failure classes, coarse enough to map onto exit codes.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or invalid invocation (bad flag combinations,
    /// out-of-range hyperparameters, unknown variant ids).
    #[error("config error: {0}")]
    Config(String),

    /// Malformed, inconsistent, or missing data: manifests, records,
    /// checkpoints, run artifacts.
    #[error("data error: {0}")]
    Data(String),

    /// Numerical failure: divergence, non-finite loss, gradient-check
    /// tolerance violation, degenerate pooling or attention input.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for this failure class.
    ///
    /// 2 = config/usage, 3 = data (io included: every io failure here occurs
    /// while reading or writing datasets, checkpoints, or run directories),
    /// 4 = numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io(_) => 3,
            Error::Numerical(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
