//! Simulation and analysis of spin-dependent polarization rotation from a
//! charged quantum dot in a micropillar cavity.
//!
//! The crate layers, bottom up: [`optics`] (steady-state reflection),
//! [`dynamics`] (spectral jitter and spin flips), [`detection`] (binned photon
//! counts on four detectors), [`herald`] and [`histogram`] (heralded phase
//! estimation), [`timescale`] (bin-width sweeps). [`experiment`] ties these to
//! configs and files.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod csvio;
pub mod detection;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod fit;
pub mod herald;
pub mod histogram;
pub mod manifest;
pub mod optics;
pub mod timescale;

pub use config::ExperimentConfig;
pub use detection::{BinRecord, DetectionConfig};
pub use dynamics::{JitterParams, RandomSeed, SpinParams, Ticks, Trajectory};
pub use error::{Error, Result};
pub use herald::{HeraldCriteria, HeraldMode, PhaseEstimate};
pub use optics::{ReflectionModel, Spin};
