use fieldsam_data::DataError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Toml {
        path: String,
        #[source]
        source: toml::de::Error,
    },

    #[error(transparent)]
    Core(#[from] fieldsam_core::Error),

    #[error(transparent)]
    Data(#[from] DataError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("{0}")]
    Runtime(String),
}

impl From<candle_core::Error> for CliError {
    fn from(e: candle_core::Error) -> Self {
        CliError::Core(e.into())
    }
}

fn core_is_config(e: &fieldsam_core::Error) -> bool {
    matches!(e, fieldsam_core::Error::Config(_) | fieldsam_core::Error::MissingTargets(_))
}

fn data_is_config(e: &DataError) -> bool {
    match e {
        DataError::Config(_) => true,
        DataError::Core(c) => core_is_config(c),
        DataError::Tile { source, .. } => data_is_config(source),
        _ => false,
    }
}

impl CliError {
    /// Process exit status: 1 for usage and configuration errors, 2 for
    /// failures while running.
    pub fn exit_code(&self) -> i32 {
        let config = match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Toml { .. } => true,
            CliError::Core(e) => core_is_config(e),
            CliError::Data(e) => data_is_config(e),
            _ => false,
        };
        if config {
            1
        } else {
            2
        }
    }
}
