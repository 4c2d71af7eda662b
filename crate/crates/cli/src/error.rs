use std::path::PathBuf;

use thiserror::Error;

/// Failures surfaced by the command-line front end.
#[derive(Debug, Error)]
pub enum CliError {
    /// The config file is malformed, fails the schema, or has bad values.
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Core(#[from] jano_core::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),

    #[error("json output: {0}")]
    Json(#[from] serde_json::Error),

    /// A result failed one of the run's own consistency checks.
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl CliError {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for config problems, 3 for numeric or invariant
    /// violations, 4 when no plan fits the budget, 1 for I/O failures.
    pub fn exit_code(&self) -> i32 {
        use jano_core::Error as E;
        match self {
            Self::Config { .. } => 2,
            Self::Core(E::InvalidInput(_)) => 2,
            Self::Core(E::BudgetInfeasible { .. }) => 4,
            Self::Core(E::Io(_)) | Self::Io { .. } | Self::Csv(_) | Self::Json(_) => 1,
            Self::Core(_) | Self::Invariant(_) => 3,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
