use thiserror::Error;

/// Failure of a command, split by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments, unreadable or inconsistent configuration.
    #[error("{0}")]
    Config(String),
    /// Numeric or I/O failure while the command was running.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<odp_core::Error> for CliError {
    fn from(e: odp_core::Error) -> Self {
        use odp_core::Error as E;
        match e {
            E::UnknownGroup { .. }
            | E::ModelConfig(_)
            | E::CacheConfig(_)
            | E::WindowNeverFills { .. }
            | E::SplitPlan(_)
            | E::NoFrozenPrefix(_)
            | E::Optimizer(_)
            | E::Checkpoint(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
