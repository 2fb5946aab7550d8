use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(chronorag_core::Error),
    #[error("backend error: {0}")]
    Backend(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Backend(_) => 3,
        }
    }
}

impl From<chronorag_core::Error> for CliError {
    fn from(e: chronorag_core::Error) -> Self {
        match e {
            chronorag_core::Error::Backend(msg) => CliError::Backend(msg),
            other => CliError::Data(other),
        }
    }
}
