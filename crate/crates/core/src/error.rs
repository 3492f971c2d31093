use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration for `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("Langevin sampler diverged at step {step}: non-finite gradient")]
    SamplerDivergence { step: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("data integrity check failed for {path}: {reason}")]
    DataIntegrity { path: PathBuf, reason: String },

    #[error("operation `{op}` is not available in {mode} mode")]
    Mode { op: &'static str, mode: String },

    #[error("sequencing error: {0}")]
    Sequencing(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
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

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Mode { .. } => 2,
            Error::SamplerDivergence { .. } | Error::Numerical(_) => 3,
            Error::Io { .. } | Error::DataIntegrity { .. } | Error::Format { .. } => 4,
            Error::Contract(_) | Error::Sequencing(_) => 1,
        }
    }
}
