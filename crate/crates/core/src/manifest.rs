//! Run manifest written next to every output.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub toolkit_version: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub stream_id: Option<u64>,
    pub outputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub warning: Option<String>,
    /// Not part of any determinism comparison.
    pub wall_clock_s: f64,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &ExperimentConfig) -> Self {
        Self {
            command: command.to_owned(),
            config_hash: cfg.hash(),
            toolkit_version: TOOLKIT_VERSION.to_owned(),
            seed: Some(cfg.run.seed),
            stream_id: Some(cfg.run.stream_id),
            outputs: Vec::new(),
            warning: cfg.cavity_warning(),
            wall_clock_s: 0.0,
        }
    }

    /// Manifest for a run driven by something other than an experiment
    /// config; `settings_hash` identifies the options used.
    pub fn for_settings(command: &str, settings_hash: String) -> Self {
        Self {
            command: command.to_owned(),
            config_hash: settings_hash,
            toolkit_version: TOOLKIT_VERSION.to_owned(),
            seed: None,
            stream_id: None,
            outputs: Vec::new(),
            warning: None,
            wall_clock_s: 0.0,
        }
    }

    pub fn path_for(out: &Path) -> PathBuf {
        let mut name = out.as_os_str().to_owned();
        name.push(".manifest.json");
        PathBuf::from(name)
    }

    pub fn write(&self, out: &Path) -> Result<PathBuf> {
        let path = Self::path_for(out);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(Error::io(format!("writing {}", path.display())))?;
        Ok(path)
    }
}
