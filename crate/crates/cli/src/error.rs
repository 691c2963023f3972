use std::path::Path;

use thiserror::Error;

/// Failure of a subcommand, carrying the process exit code class.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Data(String),

    #[error("{0}")]
    Diverged(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Diverged(_) => 3,
        }
    }

    /// Prefixes the message with the file it concerns.
    pub fn at(self, path: &Path) -> Self {
        let p = path.display();
        match self {
            CliError::Usage(m) => CliError::Usage(format!("{p}: {m}")),
            CliError::Data(m) => CliError::Data(format!("{p}: {m}")),
            CliError::Diverged(m) => CliError::Diverged(format!("{p}: {m}")),
        }
    }
}

impl From<moener::Error> for CliError {
    fn from(e: moener::Error) -> Self {
        use moener::Error as E;
        match e {
            E::Diverged(_) | E::NonFinite(_) => CliError::Diverged(e.to_string()),
            E::InvalidConfig(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
