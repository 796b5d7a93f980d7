use thiserror::Error;

/// Exit status contract: 0 success, 1 usage/config, 2 runtime, 3 not applicable.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Runtime(String),

    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error(transparent)]
    Lab(#[from] ltlab::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::NotApplicable(_) => 3,
            CliError::Lab(ltlab::Error::Config(_)) => 1,
            CliError::Lab(_) => 2,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }
}

pub type CliResult<T> = Result<T, CliError>;
