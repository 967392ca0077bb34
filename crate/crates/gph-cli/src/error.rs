use std::fmt;

use gph_core::GphError;

use crate::config::ConfigError;

#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Usage(String),
    Core(GphError),
    /// a verification suite reported failures
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Core(GphError::Argument(_)) => 2,
            CliError::Core(GphError::Capacity { .. }) => 3,
            CliError::Core(GphError::State(_)) => 4,
            CliError::Core(_) | CliError::Failed(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "{e}"),
            CliError::Usage(m) | CliError::Failed(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<GphError> for CliError {
    fn from(e: GphError) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(GphError::Io(e))
    }
}
