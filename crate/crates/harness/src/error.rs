use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Invalid configuration; `path` is the dotted key that failed.
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("{0}")]
    Usage(String),

    #[error("run directory {0} already exists; pass --force to replace it")]
    RunDirExists(PathBuf),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    /// A numerical invariant did not hold.
    #[error("{0}")]
    Invariant(String),

    #[error(transparent)]
    Core(#[from] dkm_core::Error),
}

impl HarnessError {
    pub fn config(path: impl Into<String>, message: impl ToString) -> Self {
        HarnessError::Config {
            path: path.into(),
            message: message.to_string(),
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        HarnessError::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit status: 2 for bad configuration or invocation, 3 for
    /// numerical divergence, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config { .. } | HarnessError::Usage(_) => 2,
            HarnessError::Invariant(_) => 3,
            HarnessError::Core(e) if e.is_numeric() => 3,
            _ => 1,
        }
    }
}
