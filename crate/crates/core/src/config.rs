//! Experiment configuration.
//!
//! Configs are flat text files of dotted keys, one per line:
//!
//! ```text
//! model.beta = 0.65
//! jitter.jump_timescale_us = 1500.0
//! spin.initial = "random"
//! ```
//!
//! The syntax is TOML, so `inf` is accepted for frozen processes. Units are
//! part of each key name and values are bare numbers; a value such as
//! `0.7ueV` is a parse error.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::detection::DetectionConfig;
use crate::dynamics::{JitterParams, RandomSeed, SpinParams, Ticks};
use crate::optics::{CavitySpec, ReflectionModel};

/// Smallest horizon, in bins.
pub const MIN_BINS_PER_HORIZON: f64 = 100.0;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config field {field}: {reason}")]
    Invalid { field: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunParams {
    pub horizon_us: f64,
    pub seed: u64,
    #[serde(default)]
    pub stream_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ReflectionModel,
    pub jitter: JitterParams,
    pub spin: SpinParams,
    pub detection: DetectionConfig,
    pub run: RunParams,
    #[serde(default)]
    pub cavity: CavitySpec,
}

impl Default for ExperimentConfig {
    /// The measured device: β = 0.65, 20 % background, 0.7 µeV line, 5 µeV
    /// jitter with 1.5 ms dwell, T1 = 250 µs, 100 µs bins over 10 s.
    fn default() -> Self {
        Self {
            model: ReflectionModel::default(),
            jitter: JitterParams::default(),
            spin: SpinParams::default(),
            detection: DetectionConfig::default(),
            run: RunParams { horizon_us: 1e7, seed: 2017, stream_id: 0 },
            cavity: CavitySpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |field: &str, reason: String| ConfigError::Invalid { field: field.to_owned(), reason };
        self.model.validate().map_err(|e| invalid("model", e.to_string()))?;
        self.jitter.validate().map_err(|e| invalid("jitter", e.to_string()))?;
        self.spin.validate().map_err(|e| invalid("spin", e.to_string()))?;
        self.detection.validate().map_err(|e| invalid("detection", e.to_string()))?;
        let h = self.run.horizon_us;
        if !(h > 0.0 && h.is_finite()) || Ticks::from_us_exact(h).is_none() {
            return Err(invalid("run.horizon_us", "must be positive, finite and a whole number of 0.1 µs ticks".into()));
        }
        if h < MIN_BINS_PER_HORIZON * self.detection.bin_width {
            return Err(invalid("run.horizon_us", format!("must be at least {MIN_BINS_PER_HORIZON} × detection.bin_width_us")));
        }
        Ok(())
    }

    pub fn seed(&self) -> RandomSeed {
        RandomSeed::new(self.run.seed, self.run.stream_id)
    }

    pub fn horizon(&self) -> Ticks {
        Ticks::from_us(self.run.horizon_us)
    }

    /// Canonical text form: every field, fixed order, TOML syntax.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of [`Self::canonical`], hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    /// Warning for passive-cavity metadata that does not hold together.
    pub fn cavity_warning(&self) -> Option<String> {
        self.cavity.check().err().map(|e| e.to_string())
    }
}
