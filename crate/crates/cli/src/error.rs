use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Core(#[from] hksl::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    /// Process exit status: 1 for configuration problems, 3 for numerical
    /// aborts, 2 for every other failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(hksl::Error::Config(_)) => 1,
            CliError::Core(hksl::Error::NonFinite(_)) => 3,
            _ => 2,
        }
    }

    /// Reclassifies any failure as a configuration error.
    pub fn config(e: impl std::fmt::Display) -> Self {
        CliError::Config(e.to_string())
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
