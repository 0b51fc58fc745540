use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{0}")]
    Ingest(wus_core::Error),

    #[error("numerical failure: {0}")]
    NonFinite(wus_core::Error),

    #[error(transparent)]
    Core(wus_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 for configuration problems, 3 for unreadable data, 4 for a diverged
    /// run, 1 for anything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Ingest(_) => 3,
            CliError::NonFinite(_) => 4,
            CliError::Core(_) | CliError::Io(_) => 1,
        }
    }
}

impl From<wus_core::Error> for CliError {
    fn from(e: wus_core::Error) -> Self {
        use wus_core::Error as E;
        match e {
            E::Config(msg) => CliError::Config(msg),
            E::Build { .. } => CliError::Config(e.to_string()),
            E::Ingest { .. } => CliError::Ingest(e),
            E::NonFinite { .. } => CliError::NonFinite(e),
            other => CliError::Core(other),
        }
    }
}

impl From<toml::de::Error> for CliError {
    fn from(e: toml::de::Error) -> Self {
        CliError::Config(e.to_string())
    }
}
