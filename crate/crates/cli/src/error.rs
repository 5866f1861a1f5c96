use std::fmt;

use caps_core::error::CapsError;

/// Failure classes and their process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// A bound or admissibility violation found by `verify`.
    Violation(String),
    /// The config does not match the schema or fails validation.
    Schema(String),
    /// A referenced input file or directory does not exist.
    MissingInput(String),
    /// Anything else: divergence, corrupt inputs, failed writes.
    Invariant(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Violation(_) => 1,
            CliError::Schema(_) => 2,
            CliError::MissingInput(_) => 3,
            CliError::Invariant(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Violation(m) => write!(f, "verification failed: {m}"),
            CliError::Schema(m) => write!(f, "config error: {m}"),
            CliError::MissingInput(m) => write!(f, "missing input: {m}"),
            CliError::Invariant(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<CapsError> for CliError {
    fn from(e: CapsError) -> Self {
        match &e {
            CapsError::InvalidSpec(_) => CliError::Schema(e.to_string()),
            CapsError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                CliError::MissingInput(e.to_string())
            }
            _ => CliError::Invariant(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
