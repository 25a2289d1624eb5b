//! Four-APD detection behind a non-polarizing splitter.
//!
//! APD-1 (V) and APD-2 (H) sit in the herald arm, APD-3 (V) and APD-4 (H) in
//! the measurement arm. Counts are ideal Poisson draws with the exact
//! time-integral of the piecewise-constant rates over each bin.

use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{purpose, RandomSeed, Ticks, Trajectory, TrajectorySegment};
use crate::optics::{ReflectionModel, Spin};

pub const APD_COUNT: usize = 4;

/// Bins per RNG substream. Fixed so output does not depend on thread count.
pub const CHUNK_BINS: usize = 2048;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectionError {
    #[error("invalid detection.{field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("horizon {horizon} µs holds no complete {width} µs bin")]
    NoBins { horizon: Ticks, width: Ticks },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionConfig {
    /// Detected photon flux before the splitter, counts/µs.
    #[serde(rename = "total_detected_rate_per_us")]
    pub total_detected_rate: f64,
    /// Fraction sent to the herald arm.
    pub splitter_ratio: f64,
    /// Dark counts per APD, counts/µs.
    #[serde(rename = "dark_rate_per_us")]
    pub dark_rate_per_apd: [f64; APD_COUNT],
    /// Extra background on APD-1 and APD-2 only, counts/µs.
    #[serde(rename = "herald_excess_background_per_us")]
    pub herald_excess_background_rate: f64,
    #[serde(rename = "bin_width_us")]
    pub bin_width: f64,
}

impl Default for DetectionConfig {
    /// 1 count/µs detected, 50:50 split, 0.1 kHz darks, and a herald excess
    /// chosen so the far-detuned APD-2 floor is 17 kHz.
    fn default() -> Self {
        Self {
            total_detected_rate: 1.0,
            splitter_ratio: 0.5,
            dark_rate_per_apd: [1e-4; APD_COUNT],
            herald_excess_background_rate: 0.0169,
            bin_width: 100.0,
        }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<(), DetectionError> {
        let bad = |field, reason: &str| Err(DetectionError::InvalidConfig { field, reason: reason.to_owned() });
        let rate_ok = |r: f64| r >= 0.0 && r.is_finite();
        if !rate_ok(self.total_detected_rate) {
            return bad("total_detected_rate_per_us", "must be finite and non-negative");
        }
        if !(self.splitter_ratio > 0.0 && self.splitter_ratio < 1.0) {
            return bad("splitter_ratio", "must lie in (0, 1)");
        }
        if !self.dark_rate_per_apd.iter().all(|&r| rate_ok(r)) {
            return bad("dark_rate_per_us", "must be finite and non-negative");
        }
        if !rate_ok(self.herald_excess_background_rate) {
            return bad("herald_excess_background_per_us", "must be finite and non-negative");
        }
        if !(self.bin_width > 0.0) || Ticks::from_us_exact(self.bin_width).is_none() {
            return bad("bin_width_us", "must be positive and a whole number of 0.1 µs ticks");
        }
        Ok(())
    }

    pub fn bin_ticks(&self) -> Ticks {
        Ticks::from_us(self.bin_width)
    }
}

/// Mean count rates per APD in counts/µs for one trajectory segment.
pub fn instantaneous_rates(model: &ReflectionModel, cfg: &DetectionConfig, seg: &TrajectorySegment) -> [f64; APD_COUNT] {
    let i = model.diluted_projections(seg.detuning, seg.spin);
    let herald = cfg.total_detected_rate * cfg.splitter_ratio;
    let measure = cfg.total_detected_rate * (1.0 - cfg.splitter_ratio);
    let excess = cfg.herald_excess_background_rate;
    let d = cfg.dark_rate_per_apd;
    [herald * i.v + d[0] + excess, herald * i.h + d[1] + excess, measure * i.v + d[2], measure * i.h + d[3]]
}

/// Ground truth attached to a simulated bin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinTruth {
    /// Time-averaged detuning over the bin, µeV.
    pub detuning: f64,
    /// Spin occupied for the larger part of the bin (ties go to down).
    pub spin: Spin,
    /// Noise-free `φ_LB` of the bin's expected APD-3/APD-4 counts.
    pub phase: f64,
    /// Expected counts per APD; only known for simulated data.
    pub expected_counts: Option<[f64; APD_COUNT]>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinRecord {
    pub bin_index: u64,
    pub t_start: Ticks,
    /// APD-1 V-herald, APD-2 H-herald, APD-3 V-measure, APD-4 H-measure.
    pub counts: [u64; APD_COUNT],
    pub truth: Option<BinTruth>,
}

impl BinRecord {
    pub fn herald(&self) -> (u64, u64) {
        (self.counts[0], self.counts[1])
    }

    pub fn measure(&self) -> (u64, u64) {
        (self.counts[2], self.counts[3])
    }
}

fn poisson<R: rand::Rng>(rng: &mut R, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    // Poisson::new only rejects non-positive or non-finite means.
    let x: f64 = Poisson::new(mean).expect("positive finite mean").sample(rng);
    x as u64
}

/// Integrates segment rates over `[start, start + width)`.
fn integrate_bin(
    trajectory: &Trajectory,
    rates: &[[f64; APD_COUNT]],
    first_segment: usize,
    start: Ticks,
    width: Ticks,
) -> ([f64; APD_COUNT], BinTruth, usize) {
    let end = start + width;
    let segments = trajectory.segments();
    let mut k = first_segment;
    let mut mean = [0.0; APD_COUNT];
    let mut detuning = 0.0;
    let mut down = 0i64;
    while k < segments.len() {
        let s = &segments[k];
        let lo = s.t_start.max(start);
        let hi = s.t_end().min(end);
        if hi > lo {
            let dt = (hi - lo).as_us();
            for (m, r) in mean.iter_mut().zip(&rates[k]) {
                *m += r * dt;
            }
            detuning += s.detuning * dt;
            if s.spin == Spin::Down {
                down += (hi - lo).0;
            }
        }
        if s.t_end() > end {
            break;
        }
        k += 1;
    }
    let spin = if 2 * down >= width.0 { Spin::Down } else { Spin::Up };
    let (v, h) = (mean[2], mean[3]);
    let phase = if v + h > 0.0 { ((v - h) / (v + h)).clamp(-1.0, 1.0).acos() } else { f64::NAN };
    let truth = BinTruth { detuning: detuning / width.as_us(), spin, phase, expected_counts: Some(mean) };
    (mean, truth, k.min(segments.len() - 1))
}

/// Samples every complete bin of `cfg.bin_width` over the trajectory.
///
/// Bins are processed in fixed chunks of [`CHUNK_BINS`], each with its own
/// substream, so the result is identical for any number of worker threads.
pub fn sample_bins(
    model: &ReflectionModel,
    cfg: &DetectionConfig,
    trajectory: &Trajectory,
    seed: RandomSeed,
) -> Result<Vec<BinRecord>, DetectionError> {
    sample_bins_keyed(model, cfg, trajectory, seed, 0)
}

/// As [`sample_bins`], with `key` selecting a disjoint family of count
/// substreams (used when the same trajectory is re-binned repeatedly).
pub fn sample_bins_keyed(
    model: &ReflectionModel,
    cfg: &DetectionConfig,
    trajectory: &Trajectory,
    seed: RandomSeed,
    key: u64,
) -> Result<Vec<BinRecord>, DetectionError> {
    cfg.validate()?;
    let width = cfg.bin_ticks();
    let n_bins = (trajectory.horizon().0 / width.0) as usize;
    if n_bins == 0 {
        return Err(DetectionError::NoBins { horizon: trajectory.horizon(), width });
    }
    let rates: Vec<[f64; APD_COUNT]> = trajectory.segments().iter().map(|s| instantaneous_rates(model, cfg, s)).collect();
    let n_chunks = n_bins.div_ceil(CHUNK_BINS);
    let chunks: Vec<Vec<BinRecord>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = seed.rng(purpose::COUNTS, (key << 32) | c as u64);
            let first = c * CHUNK_BINS;
            let last = (first + CHUNK_BINS).min(n_bins);
            let mut seg = trajectory.segment_index_at(Ticks(first as i64 * width.0));
            let mut out = Vec::with_capacity(last - first);
            for b in first..last {
                let start = Ticks(b as i64 * width.0);
                let (mean, truth, next) = integrate_bin(trajectory, &rates, seg, start, width);
                seg = next;
                let mut counts = [0u64; APD_COUNT];
                for (c, m) in counts.iter_mut().zip(mean) {
                    *c = poisson(&mut rng, m);
                }
                out.push(BinRecord { bin_index: b as u64, t_start: start, counts, truth: Some(truth) });
            }
            out
        })
        .collect();
    Ok(chunks.into_iter().flatten().collect())
}

/// Sums runs of `factor` consecutive bins into wider bins. A trailing
/// partial group is dropped. Truth is recombined from expected counts when
/// every input carries them.
pub fn rebin(bins: &[BinRecord], factor: usize) -> Vec<BinRecord> {
    assert!(factor > 0, "rebin factor must be positive");
    bins.chunks_exact(factor)
        .enumerate()
        .map(|(k, group)| {
            let mut counts = [0u64; APD_COUNT];
            for b in group {
                for (c, x) in counts.iter_mut().zip(b.counts) {
                    *c += x;
                }
            }
            let truth = group.iter().map(|b| b.truth).collect::<Option<Vec<_>>>().and_then(|ts| {
                let mut mean = [0.0; APD_COUNT];
                for t in &ts {
                    for (m, x) in mean.iter_mut().zip(t.expected_counts?) {
                        *m += x;
                    }
                }
                let down = ts.iter().filter(|t| t.spin == Spin::Down).count();
                let (v, h) = (mean[2], mean[3]);
                Some(BinTruth {
                    detuning: ts.iter().map(|t| t.detuning).sum::<f64>() / ts.len() as f64,
                    spin: if 2 * down >= ts.len() { Spin::Down } else { Spin::Up },
                    phase: if v + h > 0.0 { ((v - h) / (v + h)).clamp(-1.0, 1.0).acos() } else { f64::NAN },
                    expected_counts: Some(mean),
                })
            });
            BinRecord { bin_index: k as u64, t_start: group[0].t_start, counts, truth }
        })
        .collect()
}
