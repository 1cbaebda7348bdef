use std::fs;
use std::path::{Path, PathBuf};

use fusemerge::merge::MergeConfig;
use fusemerge::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Paths a config file may supply instead of flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub base: Option<PathBuf>,
    pub targets: Vec<PathBuf>,
    pub out: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub pivot: Option<PathBuf>,
    pub teacher_dir: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

/// The `--config` document. Flags override any value given here.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub merge: MergeConfig,
    pub train: TrainConfig,
    pub paths: Paths,
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(CliConfig::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::io(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))
    }
}

/// Every input must exist before any work starts.
pub fn require_files<'a>(paths: impl IntoIterator<Item = &'a Path>) -> Result<(), CliError> {
    for p in paths {
        if !p.exists() {
            return Err(CliError::io(format!("no such file: {}", p.display())));
        }
    }
    Ok(())
}
