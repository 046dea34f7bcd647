use thiserror::Error;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] quantnet::Error),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Toml {
        path: String,
        #[source]
        source: toml::de::Error,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::Core(quantnet::Error::NumericOverflow { .. } | quantnet::Error::NonFiniteLikelihood { .. }) => {
                EXIT_NUMERIC
            }
            _ => EXIT_INVALID,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
