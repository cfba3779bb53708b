use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xstream_core::data::SyntheticSpec;
use xstream_core::trainer::TrainConfig;

use crate::error::CliError;

/// Environment variable that replaces the `--config` path when set.
pub const CONFIG_ENV: &str = "XSTREAM_CONFIG";

/// Everything a run can be configured with. Command-line flags are applied
/// on top of the loaded file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: SyntheticSpec,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|source| CliError::Config { path: origin.to_owned(), source })
    }

    /// Loads the file named by the environment override or by `flag`, or
    /// the defaults when neither is given.
    pub fn resolve(flag: Option<&Path>) -> Result<Self, CliError> {
        let path = std::env::var_os(CONFIG_ENV).map(PathBuf::from).or_else(|| flag.map(Path::to_owned));
        match path {
            None => Ok(Self::default()),
            Some(path) => {
                let text = std::fs::read_to_string(&path).map_err(|source| CliError::Io { path: path.clone(), source })?;
                Self::from_json(&text, &path)
            }
        }
    }
}
