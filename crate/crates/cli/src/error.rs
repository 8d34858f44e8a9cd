use std::path::Path;

use thiserror::Error;

/// Failure of a subcommand, split by the exit status it maps to.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, malformed config, unreadable input, unwritable output.
    #[error("{0}")]
    Usage(String),
    /// The numerics broke: non-finite losses, violated invariants, every
    /// trial failing, or a failed self-check.
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        CliError::Usage(format!("{}: {err}", path.display()))
    }
}

impl From<unitary_mesh::Error> for CliError {
    fn from(e: unitary_mesh::Error) -> Self {
        use unitary_mesh::Error as E;
        match e {
            E::NonFinite { .. } | E::InvariantViolation(_) | E::AllTrialsFailed => {
                CliError::Numeric(e.to_string())
            }
            _ => CliError::Usage(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
