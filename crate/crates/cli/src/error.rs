use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Data(String),

    #[error(transparent)]
    Core(#[from] tsjm::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 1 usage, 2 data validation, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) | CliError::Io(_) | CliError::Csv(_) | CliError::Json(_) => 2,
            CliError::Core(e) if e.is_data_error() => 2,
            CliError::Core(e) if is_usage(e) => 1,
            CliError::Core(_) => 3,
        }
    }
}

fn is_usage(e: &tsjm::Error) -> bool {
    match e {
        tsjm::Error::InvalidArgument(_) => true,
        tsjm::Error::Marker { source, .. } | tsjm::Error::Imputation { source, .. } => is_usage(source),
        _ => false,
    }
}
