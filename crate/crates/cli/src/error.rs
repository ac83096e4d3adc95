use std::path::PathBuf;

use backeisnn::network::NetworkError;
use backeisnn::optimizer::OptimizerError;
use backeisnn_data::DataError;

/// Errors grouped by the exit code the binary reports.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(#[from] DataError),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("checkpoint {}: {reason}", path.display())]
    Checkpoint { path: PathBuf, reason: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Network(#[from] NetworkError),
}

impl CliError {
    pub const EXIT_INTERNAL: i32 = 1;
    pub const EXIT_CONFIG: i32 = 2;
    pub const EXIT_DATA: i32 = 3;
    pub const EXIT_NUMERIC: i32 = 4;
    pub const EXIT_IO: i32 = 5;

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => Self::EXIT_CONFIG,
            CliError::Data(_) => Self::EXIT_DATA,
            CliError::Numeric(_) => Self::EXIT_NUMERIC,
            CliError::Checkpoint { .. } | CliError::Io { .. } => Self::EXIT_IO,
            CliError::Network(_) => Self::EXIT_INTERNAL,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<OptimizerError> for CliError {
    fn from(e: OptimizerError) -> Self {
        match e {
            OptimizerError::NonFiniteGradient { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}
