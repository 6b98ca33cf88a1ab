use prefnet_service::ServiceError;

/// Exit code 1 for bad input or configuration, 2 for failures while running.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),

    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<prefnet::Error> for CliError {
    fn from(e: prefnet::Error) -> Self {
        use prefnet::Error as E;
        match e {
            E::Validation(_)
            | E::InvalidArgument(_)
            | E::UnknownMask(_)
            | E::Parse { .. }
            | E::Format { .. }
            | E::UnsupportedRate { .. } => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<ServiceError> for CliError {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Core(inner) => inner.into(),
            ServiceError::Invalid { .. } | ServiceError::Conflict(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
