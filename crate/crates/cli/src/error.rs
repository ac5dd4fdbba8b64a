use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing prerequisite: {0}")]
    Dependency(String),
    #[error(transparent)]
    Core(#[from] stylerec::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 config, 3 dependency, 4 numerical abort, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(stylerec::Error::Generation(_)) => 2,
            CliError::Dependency(_) => 3,
            CliError::Core(stylerec::Error::NonFinite { .. }) => 4,
            _ => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
