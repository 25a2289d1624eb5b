//! Ground-truth trajectories of dot detuning and spin.
//!
//! Time is kept in integer ticks of 0.1 µs so that segment tilings are exact.
//! Spectral jitter is a renewal process: exponential dwells, and at every
//! jump the detuning is redrawn from the stationary Gaussian. The spin is a
//! two-state telegraph with exponential dwells.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optics::{Spin, GAUSSIAN_FWHM_PER_SIGMA};

pub const TICKS_PER_US: i64 = 10;

/// Simulated time in 0.1 µs ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Ticks(pub i64);

impl Ticks {
    pub const ZERO: Ticks = Ticks(0);

    /// Nearest whole tick.
    pub fn from_us(us: f64) -> Self {
        Ticks((us * TICKS_PER_US as f64).round() as i64)
    }

    /// Exact conversion, or `None` if `us` is not a whole number of ticks.
    pub fn from_us_exact(us: f64) -> Option<Self> {
        let scaled = us * TICKS_PER_US as f64;
        let rounded = scaled.round();
        ((scaled - rounded).abs() < 1e-9 * scaled.abs().max(1.0) && rounded.abs() < 9.0e15).then_some(Ticks(rounded as i64))
    }

    pub fn as_us(self) -> f64 {
        self.0 as f64 / TICKS_PER_US as f64
    }
}

impl std::ops::Add for Ticks {
    type Output = Ticks;
    fn add(self, rhs: Ticks) -> Ticks {
        Ticks(self.0 + rhs.0)
    }
}

impl std::ops::Sub for Ticks {
    type Output = Ticks;
    fn sub(self, rhs: Ticks) -> Ticks {
        Ticks(self.0 - rhs.0)
    }
}

impl fmt::Display for Ticks {
    /// Microseconds with one decimal, e.g. `100.0`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        write!(f, "{sign}{}.{}", abs / TICKS_PER_US as u64, abs % TICKS_PER_US as u64)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("invalid {field}: {reason}")]
    InvalidParams { field: &'static str, reason: String },
    #[error("horizon must be positive, got {0} ticks")]
    NonPositiveHorizon(i64),
    #[error("trajectories cover different horizons: jitter ends at {jitter} µs, spin at {spin} µs")]
    MismatchedHorizons { jitter: Ticks, spin: Ticks },
    #[error("segments do not tile [0, horizon): {0}")]
    BrokenTiling(String),
}

/// Seed plus a per-trajectory substream selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub struct RandomSeed {
    pub seed: u64,
    #[serde(default)]
    pub stream_id: u64,
}

/// Purposes keep the substreams of one trajectory disjoint.
pub(crate) mod purpose {
    pub const JITTER: u64 = 1;
    pub const SPIN: u64 = 2;
    pub const COUNTS: u64 = 3;
}

impl RandomSeed {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    /// Independent ChaCha stream keyed by `(seed, stream_id, purpose, index)`.
    pub fn rng(&self, purpose: u64, index: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        for (chunk, word) in key.chunks_exact_mut(8).zip([self.seed, self.stream_id, purpose, index]) {
            chunk.copy_from_slice(&word.to_le_bytes());
        }
        ChaCha8Rng::from_seed(key)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JitterParams {
    /// Stationary FWHM of the detuning distribution, µeV. Zero disables
    /// jitter.
    #[serde(rename = "inhomogeneous_fwhm_ueV")]
    pub inhomogeneous_fwhm: f64,
    /// Mean dwell between jumps, µs. `inf` freezes the first draw.
    #[serde(rename = "jump_timescale_us")]
    pub jump_timescale: f64,
    /// Mean laser–dot detuning, µeV.
    #[serde(rename = "center_ueV", default)]
    pub center: f64,
}

impl Default for JitterParams {
    fn default() -> Self {
        Self { inhomogeneous_fwhm: 5.0, jump_timescale: 1500.0, center: 0.0 }
    }
}

impl JitterParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.inhomogeneous_fwhm >= 0.0 && self.inhomogeneous_fwhm.is_finite()) {
            return Err(DynamicsError::InvalidParams {
                field: "jitter.inhomogeneous_fwhm_ueV",
                reason: "must be finite and non-negative".into(),
            });
        }
        if !(self.jump_timescale > 0.0) {
            return Err(DynamicsError::InvalidParams { field: "jitter.jump_timescale_us", reason: "must be positive".into() });
        }
        if !self.center.is_finite() {
            return Err(DynamicsError::InvalidParams { field: "jitter.center_ueV", reason: "must be finite".into() });
        }
        Ok(())
    }

    pub fn sigma(&self) -> f64 {
        self.inhomogeneous_fwhm / GAUSSIAN_FWHM_PER_SIGMA
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialSpin {
    Up,
    Down,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpinParams {
    /// Mean dwell in each spin state, µs. `inf` pins the initial state.
    #[serde(rename = "t1_us")]
    pub t1: f64,
    #[serde(rename = "initial")]
    pub initial_spin: InitialSpin,
    /// Dwell asymmetry `a` in `(−1, 1)`: mean dwell is `t1·(1+a)` in down
    /// and `t1·(1−a)` in up.
    #[serde(default)]
    pub asymmetry: f64,
}

impl Default for SpinParams {
    fn default() -> Self {
        Self { t1: 250.0, initial_spin: InitialSpin::Random, asymmetry: 0.0 }
    }
}

impl SpinParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.t1 > 0.0) {
            return Err(DynamicsError::InvalidParams { field: "spin.t1_us", reason: "must be positive".into() });
        }
        if !(self.asymmetry > -1.0 && self.asymmetry < 1.0) {
            return Err(DynamicsError::InvalidParams { field: "spin.asymmetry", reason: "must lie in (-1, 1)".into() });
        }
        Ok(())
    }

    pub fn mean_dwell(&self, spin: Spin) -> f64 {
        match spin {
            Spin::Down => self.t1 * (1.0 + self.asymmetry),
            Spin::Up => self.t1 * (1.0 - self.asymmetry),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterSegment {
    pub t_start: Ticks,
    pub duration: Ticks,
    pub detuning: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpinSegment {
    pub t_start: Ticks,
    pub duration: Ticks,
    pub spin: Spin,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySegment {
    pub t_start: Ticks,
    pub duration: Ticks,
    /// Laser − dot detuning, µeV.
    pub detuning: f64,
    pub spin: Spin,
}

impl TrajectorySegment {
    pub fn t_end(&self) -> Ticks {
        self.t_start + self.duration
    }
}

/// Exponential dwell rounded up to at least one tick; `None` for an
/// infinite mean.
fn draw_dwell<R: Rng>(rng: &mut R, mean_us: f64) -> Option<i64> {
    if mean_us.is_infinite() {
        return None;
    }
    let e: f64 = Exp1.sample(rng);
    let ticks = (e * mean_us * TICKS_PER_US as f64).ceil();
    Some(if ticks >= 1.0 { ticks.min(i64::MAX as f64 / 4.0) as i64 } else { 1 })
}

/// Unbounded stream of jitter segments; `generate_jitter` truncates it at the
/// horizon.
pub struct JitterProcess {
    params: JitterParams,
    rng: ChaCha8Rng,
    now: Ticks,
}

impl JitterProcess {
    pub fn new(params: JitterParams, seed: RandomSeed) -> Self {
        Self { params, rng: seed.rng(purpose::JITTER, 0), now: Ticks::ZERO }
    }

    fn draw_detuning(&mut self) -> f64 {
        let sigma = self.params.sigma();
        if sigma == 0.0 {
            return self.params.center;
        }
        let z: f64 = StandardNormal.sample(&mut self.rng);
        self.params.center + sigma * z
    }
}

impl Iterator for JitterProcess {
    /// `None` duration means the segment never ends.
    type Item = (Ticks, Option<Ticks>, f64);

    fn next(&mut self) -> Option<Self::Item> {
        let detuning = self.draw_detuning();
        let start = self.now;
        let dwell = draw_dwell(&mut self.rng, self.params.jump_timescale).map(Ticks);
        if let Some(d) = dwell {
            self.now = self.now + d;
        }
        Some((start, dwell, detuning))
    }
}

fn check_horizon(horizon: Ticks) -> Result<(), DynamicsError> {
    if horizon.0 <= 0 {
        Err(DynamicsError::NonPositiveHorizon(horizon.0))
    } else {
        Ok(())
    }
}

pub fn generate_jitter(params: &JitterParams, horizon: Ticks, seed: RandomSeed) -> Result<Vec<JitterSegment>, DynamicsError> {
    params.validate()?;
    check_horizon(horizon)?;
    let mut out = Vec::new();
    for (t_start, dwell, detuning) in JitterProcess::new(*params, seed) {
        let end = dwell.map_or(horizon, |d| (t_start + d).min(horizon));
        out.push(JitterSegment { t_start, duration: end - t_start, detuning });
        if end >= horizon {
            break;
        }
    }
    Ok(out)
}

pub fn generate_spin(params: &SpinParams, horizon: Ticks, seed: RandomSeed) -> Result<Vec<SpinSegment>, DynamicsError> {
    params.validate()?;
    check_horizon(horizon)?;
    let mut rng = seed.rng(purpose::SPIN, 0);
    let mut spin = match params.initial_spin {
        InitialSpin::Up => Spin::Up,
        InitialSpin::Down => Spin::Down,
        InitialSpin::Random => {
            // Stationary occupancy of the (possibly asymmetric) telegraph.
            let p_down = (1.0 + params.asymmetry) / 2.0;
            if rng.random::<f64>() < p_down {
                Spin::Down
            } else {
                Spin::Up
            }
        }
    };
    let mut out = Vec::new();
    let mut now = Ticks::ZERO;
    while now < horizon {
        let end = draw_dwell(&mut rng, params.mean_dwell(spin)).map_or(horizon, |d| (now + Ticks(d)).min(horizon));
        out.push(SpinSegment { t_start: now, duration: end - now, spin });
        now = end;
        spin = spin.flipped();
    }
    Ok(out)
}

/// Common refinement of the two partitions.
pub fn merge_trajectories(jitter: &[JitterSegment], spin: &[SpinSegment]) -> Result<Vec<TrajectorySegment>, DynamicsError> {
    let jitter_end = jitter.last().map_or(Ticks::ZERO, |s| s.t_start + s.duration);
    let spin_end = spin.last().map_or(Ticks::ZERO, |s| s.t_start + s.duration);
    if jitter_end != spin_end || jitter.is_empty() {
        return Err(DynamicsError::MismatchedHorizons { jitter: jitter_end, spin: spin_end });
    }
    let mut out = Vec::with_capacity(jitter.len() + spin.len());
    let (mut i, mut j) = (0, 0);
    let mut now = Ticks::ZERO;
    while now < jitter_end {
        let a = &jitter[i];
        let b = &spin[j];
        let a_end = a.t_start + a.duration;
        let b_end = b.t_start + b.duration;
        let end = a_end.min(b_end);
        out.push(TrajectorySegment { t_start: now, duration: end - now, detuning: a.detuning, spin: b.spin });
        now = end;
        if a_end == end {
            i += 1;
        }
        if b_end == end {
            j += 1;
        }
    }
    Ok(out)
}

/// A merged, validated trajectory over `[0, horizon)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    horizon: Ticks,
    segments: Vec<TrajectorySegment>,
}

impl Trajectory {
    pub fn new(segments: Vec<TrajectorySegment>) -> Result<Self, DynamicsError> {
        let mut now = Ticks::ZERO;
        for (k, s) in segments.iter().enumerate() {
            if s.t_start != now {
                return Err(DynamicsError::BrokenTiling(format!("segment {k} starts at {} µs, expected {now} µs", s.t_start)));
            }
            if s.duration.0 <= 0 {
                return Err(DynamicsError::BrokenTiling(format!("segment {k} has non-positive duration")));
            }
            now = s.t_end();
        }
        if now.0 == 0 {
            return Err(DynamicsError::BrokenTiling("no segments".into()));
        }
        Ok(Self { horizon: now, segments })
    }

    /// Generates and merges jitter and spin traces from one seed.
    pub fn generate(jitter: &JitterParams, spin: &SpinParams, horizon: Ticks, seed: RandomSeed) -> Result<Self, DynamicsError> {
        let (j, s) = rayon::join(|| generate_jitter(jitter, horizon, seed), || generate_spin(spin, horizon, seed));
        Self::new(merge_trajectories(&j?, &s?)?)
    }

    pub fn constant(detuning: f64, spin: Spin, horizon: Ticks) -> Result<Self, DynamicsError> {
        check_horizon(horizon)?;
        Self::new(vec![TrajectorySegment { t_start: Ticks::ZERO, duration: horizon, detuning, spin }])
    }

    pub fn horizon(&self) -> Ticks {
        self.horizon
    }

    pub fn segments(&self) -> &[TrajectorySegment] {
        &self.segments
    }

    /// Index of the segment containing `t`.
    pub fn segment_index_at(&self, t: Ticks) -> usize {
        self.segments.partition_point(|s| s.t_end() <= t).min(self.segments.len() - 1)
    }

    /// `t_start_us,duration_us,detuning_ueV,spin` dump.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t_start_us,duration_us,detuning_ueV,spin")?;
        for s in &self.segments {
            writeln!(w, "{},{},{:.6},{}", s.t_start, s.duration, s.detuning, s.spin.as_str())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn us(v: f64) -> Ticks {
        Ticks::from_us(v)
    }

    #[test]
    fn tick_formatting() {
        assert_eq!(Ticks(1005).to_string(), "100.5");
        assert_eq!(Ticks(1000).to_string(), "100.0");
        assert_eq!(Ticks(0).to_string(), "0.0");
        assert_eq!(Ticks::from_us_exact(100.0), Some(Ticks(1000)));
        assert_eq!(Ticks::from_us_exact(0.25), None);
    }

    #[test]
    fn frozen_jitter_is_one_segment() {
        let p = JitterParams { jump_timescale: f64::INFINITY, ..Default::default() };
        let segs = generate_jitter(&p, us(600.0), RandomSeed::new(1, 0)).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].duration, us(600.0));
    }

    #[test]
    fn zero_width_jitter_is_centered() {
        let p = JitterParams { inhomogeneous_fwhm: 0.0, jump_timescale: 10.0, center: 20.0 };
        let segs = generate_jitter(&p, us(10_000.0), RandomSeed::new(3, 0)).unwrap();
        assert!(segs.len() > 100);
        assert!(segs.iter().all(|s| s.detuning == 20.0));
    }

    #[test]
    fn pinned_spin_never_flips() {
        let p = SpinParams { t1: f64::INFINITY, initial_spin: InitialSpin::Down, asymmetry: 0.0 };
        let segs = generate_spin(&p, us(1e6), RandomSeed::new(5, 0)).unwrap();
        assert_eq!(segs, vec![SpinSegment { t_start: Ticks::ZERO, duration: us(1e6), spin: Spin::Down }]);
    }

    #[test]
    fn merge_refines_both_partitions() {
        let jitter = [
            JitterSegment { t_start: us(0.0), duration: us(300.0), detuning: 1.0 },
            JitterSegment { t_start: us(300.0), duration: us(300.0), detuning: 2.0 },
        ];
        let spin = [
            SpinSegment { t_start: us(0.0), duration: us(200.0), spin: Spin::Up },
            SpinSegment { t_start: us(200.0), duration: us(200.0), spin: Spin::Down },
            SpinSegment { t_start: us(400.0), duration: us(200.0), spin: Spin::Up },
        ];
        let merged = merge_trajectories(&jitter, &spin).unwrap();
        let starts: Vec<f64> = merged.iter().map(|s| s.t_start.as_us()).collect();
        assert_eq!(starts, vec![0.0, 200.0, 300.0, 400.0]);
        assert_eq!(merged.last().unwrap().t_end(), us(600.0));
        assert_eq!((merged[1].detuning, merged[1].spin), (1.0, Spin::Down));
        assert_eq!((merged[2].detuning, merged[2].spin), (2.0, Spin::Down));

        let one = merge_trajectories(&jitter[..1], &[SpinSegment { t_start: us(0.0), duration: us(300.0), spin: Spin::Up }]).unwrap();
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn merge_rejects_mismatched_horizons() {
        let jitter = [JitterSegment { t_start: us(0.0), duration: us(300.0), detuning: 1.0 }];
        let spin = [SpinSegment { t_start: us(0.0), duration: us(200.0), spin: Spin::Up }];
        assert!(matches!(merge_trajectories(&jitter, &spin), Err(DynamicsError::MismatchedHorizons { .. })));
    }

    #[test]
    fn jitter_time_weighted_spread() {
        let p = JitterParams::default();
        let segs = generate_jitter(&p, us(1e7), RandomSeed::new(11, 0)).unwrap();
        let total: f64 = segs.iter().map(|s| s.duration.0 as f64).sum();
        let mean: f64 = segs.iter().map(|s| s.detuning * s.duration.0 as f64).sum::<f64>() / total;
        let var: f64 = segs.iter().map(|s| (s.detuning - mean).powi(2) * s.duration.0 as f64).sum::<f64>() / total;
        let expected = 5.0 / 2.3548;
        assert!((var.sqrt() - expected).abs() / expected < 0.03, "{} vs {expected}", var.sqrt());
    }

    #[test]
    fn spin_flip_count_and_occupancy() {
        let p = SpinParams::default();
        let segs = generate_spin(&p, us(1e6), RandomSeed::new(2, 0)).unwrap();
        let flips = segs.len() as f64 - 1.0;
        assert!((flips - 4000.0).abs() < 2.0 * 4000f64.sqrt(), "{flips}");

        let long = generate_spin(&p, us(1e7), RandomSeed::new(2, 1)).unwrap();
        let down: i64 = long.iter().filter(|s| s.spin == Spin::Down).map(|s| s.duration.0).sum();
        let occupancy = down as f64 / us(1e7).0 as f64;
        assert!((occupancy - 0.5).abs() < 0.01, "{occupancy}");
    }

    #[test]
    fn invalid_params() {
        let bad = JitterParams { jump_timescale: 0.0, ..Default::default() };
        assert!(generate_jitter(&bad, us(10.0), RandomSeed::default()).is_err());
        let bad = SpinParams { t1: -1.0, ..Default::default() };
        assert!(generate_spin(&bad, us(10.0), RandomSeed::default()).is_err());
        assert!(generate_spin(&SpinParams::default(), Ticks(0), RandomSeed::default()).is_err());
    }

    #[test]
    fn csv_dump_header() {
        let t = Trajectory::constant(0.5, Spin::Down, us(100.0)).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "t_start_us,duration_us,detuning_ueV,spin\n0.0,100.0,0.500000,down\n");
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn merged_segments_tile_the_horizon(seed in any::<u64>(), horizon in 1i64..200_000, t1 in 1.0f64..500.0, jump in 1.0f64..3000.0) {
                let jitter = JitterParams { jump_timescale: jump, ..Default::default() };
                let spin = SpinParams { t1, ..Default::default() };
                let t = Trajectory::generate(&jitter, &spin, Ticks(horizon), RandomSeed::new(seed, 0)).unwrap();
                prop_assert_eq!(t.horizon(), Ticks(horizon));
                let sum: i64 = t.segments().iter().map(|s| s.duration.0).sum();
                prop_assert_eq!(sum, horizon);
                for w in t.segments().windows(2) {
                    prop_assert_eq!(w[0].t_end(), w[1].t_start);
                }
            }

            #[test]
            fn identical_seeds_reproduce(seed in any::<u64>(), stream in 0u64..8) {
                let j = JitterParams::default();
                let s = SpinParams::default();
                let a = Trajectory::generate(&j, &s, Ticks(500_000), RandomSeed::new(seed, stream)).unwrap();
                let b = Trajectory::generate(&j, &s, Ticks(500_000), RandomSeed::new(seed, stream)).unwrap();
                prop_assert_eq!(a, b);
            }
        }
    }
}
