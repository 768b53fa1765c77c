//! Error type shared by every module.

use std::path::PathBuf;

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Coarse failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Convergence,
    Divergence,
    Io,
}

impl ErrorCategory {
    /// Process exit code for this category.
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Convergence => 3,
            ErrorCategory::Divergence => 4,
            ErrorCategory::Io => 5,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{what} did not converge after {iterations} iterations (last residual {residual:e})")]
    Convergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("state diverged at step {step}: |x|_inf = {norm:e}")]
    Divergence { step: usize, norm: f64 },

    #[error("closed loop is not stable: norm {norm}")]
    Unstable { norm: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("subset enumeration needs {needed} subsets, budget is {budget}; use a smaller k or q")]
    Budget { needed: u128, budget: u128 },

    #[error("system generation failed: {0}")]
    Generation(String),

    #[error("optimistic selection failed: every one of {candidates} candidates was rejected")]
    Selection { candidates: usize },

    #[error("estimation failed in episode {episode}: {source}")]
    Episode {
        episode: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Category used for exit codes.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::InvalidArgument(_)
            | Error::Config(_)
            | Error::Budget { .. }
            | Error::Generation(_) => ErrorCategory::Config,
            Error::Convergence { .. } | Error::Numerical(_) | Error::Selection { .. } => {
                ErrorCategory::Convergence
            }
            Error::Divergence { .. } | Error::Unstable { .. } => ErrorCategory::Divergence,
            Error::Episode { source, .. } => source.category(),
            Error::Io { .. } => ErrorCategory::Io,
        }
    }
}
