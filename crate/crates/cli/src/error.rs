use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config {path}: {source}")]
    Config { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] xstream_core::Error),
    #[error("gradient check failed: max relative error {0:e}")]
    GradCheckFailed(f64),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 2,
            _ => 1,
        }
    }
}

/// Configuration validation failures are usage errors, not runtime ones.
pub fn invalid_config(e: xstream_core::Error) -> CliError {
    CliError::Usage(e.to_string())
}
