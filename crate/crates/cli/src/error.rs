use topicgrowth::Error;

/// CLI failure, classified by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Infeasible(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Infeasible(_) => 3,
            CliError::Internal(_) => 4,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Infeasible(_) => CliError::Infeasible(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}
