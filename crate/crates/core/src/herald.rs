//! Linear-basis phase estimate and herald selection.
//!
//! Selection only ever reads the herald arm (APD-1, APD-2). The phase is
//! taken from the measurement arm (APD-3 = V, APD-4 = H).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::BinRecord;
use crate::fit::FitError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("empty bin: n_v + n_h = 0, phase undefined")]
    EmptyBin,
    #[error("no heralded bins")]
    NoHeraldedBins,
    #[error("phase {phi:.4} rad is not in (π/2, π]; the π-shift model does not apply")]
    OutOfDomain { phi: f64 },
    #[error("stream too short: {len} bins, need at least {needed}")]
    StreamTooShort { len: usize, needed: usize },
    #[error("zero variance on channel {channel}, correlation undefined")]
    ZeroVariance { channel: usize },
    #[error("invalid sweep: {0}")]
    InvalidSweep(String),
    #[error("invalid histogram edges: {0}")]
    InvalidEdges(String),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error("count source failed: {0}")]
    Source(String),
}

/// `φ_LB` with its Poisson uncertainty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseEstimate {
    pub phi_lb: f64,
    /// Symmetric one-sigma uncertainty, radians.
    pub sigma_phi: f64,
    /// One-sigma interval obtained by mapping `cos φ ± σ_cos` through
    /// `arccos`, as `(low, high)` in radians.
    pub interval: (f64, f64),
    pub n_v: u64,
    pub n_h: u64,
    /// `(APD-1, APD-2)` rates in kHz of the bin that produced the estimate.
    pub herald_coords: Option<(f64, f64)>,
}

/// `φ_LB = arccos[(n_v − n_h)/(n_v + n_h)]`.
///
/// With independent Poisson counts the cosine `c` has variance
/// `4(n_h²·var n_v + n_v²·var n_h)/N⁴` where `var n = max(n, 1)`; the floor
/// keeps the uncertainty non-zero when a channel is empty, and for non-empty
/// channels the expression reduces to `4 n_v n_h / N³`. Away from `|c| = 1`
/// the phase uncertainty is `σ_c / sin φ`. When `c ± σ_c` leaves `[−1, 1]`
/// the derivative of `arccos` diverges, so the interval endpoints are
/// clamped and `sigma_phi` is half the interval width.
pub fn phase_lb(n_v: u64, n_h: u64) -> Result<PhaseEstimate, AnalysisError> {
    let total = n_v + n_h;
    if total == 0 {
        return Err(AnalysisError::EmptyBin);
    }
    let (v, h, n) = (n_v as f64, n_h as f64, total as f64);
    let c = ((v - h) / n).clamp(-1.0, 1.0);
    let sigma_c = 2.0 * (h * h * v.max(1.0) + v * v * h.max(1.0)).sqrt() / (n * n);
    let phi = c.acos();
    let interval = ((c + sigma_c).min(1.0).acos(), (c - sigma_c).max(-1.0).acos());
    let sigma_phi = if c.abs() + sigma_c < 1.0 { sigma_c / (1.0 - c * c).sqrt() } else { 0.5 * (interval.1 - interval.0) };
    Ok(PhaseEstimate { phi_lb: phi, sigma_phi, interval, n_v, n_h, herald_coords: None })
}

/// Fraction of collected photons that took the full π shift, assuming the
/// remainder is V-polarized background: `f = (1 − cos φ_LB)/2`.
pub fn interacting_fraction(phi_lb: f64) -> Result<f64, AnalysisError> {
    if !(phi_lb > PI / 2.0 && phi_lb <= PI) {
        return Err(AnalysisError::OutOfDomain { phi: phi_lb });
    }
    Ok((1.0 - phi_lb.cos()) / 2.0)
}

/// Count rate in kHz for `counts` collected over `width_us`.
pub fn rate_khz(counts: u64, width_us: f64) -> f64 {
    counts as f64 * 1000.0 / width_us
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeraldMode {
    /// APD-2 threshold only.
    Single,
    /// APD-2 high and APD-1 low.
    Double,
}

impl std::str::FromStr for HeraldMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single" => Ok(HeraldMode::Single),
            "double" => Ok(HeraldMode::Double),
            other => Err(format!("unknown herald mode `{other}` (expected single or double)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeraldCriteria {
    pub apd2_min_khz: f64,
    pub apd1_max_khz: f64,
    pub mode: HeraldMode,
}

impl Default for HeraldCriteria {
    fn default() -> Self {
        Self { apd2_min_khz: 100.0, apd1_max_khz: 400.0, mode: HeraldMode::Double }
    }
}

impl HeraldCriteria {
    /// Selects everything.
    pub fn open() -> Self {
        Self { apd2_min_khz: 0.0, apd1_max_khz: f64::INFINITY, mode: HeraldMode::Double }
    }

    /// Decision from herald-arm rates alone.
    pub fn accepts(&self, apd1_khz: f64, apd2_khz: f64) -> bool {
        let cross = apd2_khz >= self.apd2_min_khz;
        match self.mode {
            HeraldMode::Single => cross,
            HeraldMode::Double => cross && apd1_khz <= self.apd1_max_khz,
        }
    }

    pub fn accepts_bin(&self, bin: &BinRecord, width_us: f64) -> bool {
        let (a1, a2) = bin.herald();
        self.accepts(rate_khz(a1, width_us), rate_khz(a2, width_us))
    }
}

pub fn herald_select<'a, I>(bins: I, criteria: &HeraldCriteria, width_us: f64) -> Vec<&'a BinRecord>
where
    I: IntoIterator<Item = &'a BinRecord>,
{
    bins.into_iter().filter(|b| criteria.accepts_bin(b, width_us)).collect()
}

/// Measurement-arm counts pooled over a set of bins.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PooledCounts {
    pub n_bins: u64,
    pub n_v: u64,
    pub n_h: u64,
    /// Sum of per-bin `φ_LB` over bins with at least one count.
    pub phi_sum: f64,
    pub phi_bins: u64,
}

impl PooledCounts {
    pub fn add_counts(&mut self, n_v: u64, n_h: u64) {
        self.n_bins += 1;
        self.n_v += n_v;
        self.n_h += n_h;
        if let Ok(e) = phase_lb(n_v, n_h) {
            self.phi_sum += e.phi_lb;
            self.phi_bins += 1;
        }
    }

    pub fn add(&mut self, bin: &BinRecord) {
        let (v, h) = bin.measure();
        self.add_counts(v, h);
    }

    pub fn merge(&mut self, other: &PooledCounts) {
        self.n_bins += other.n_bins;
        self.n_v += other.n_v;
        self.n_h += other.n_h;
        self.phi_sum += other.phi_sum;
        self.phi_bins += other.phi_bins;
    }

    pub fn estimate(&self) -> Result<PhaseEstimate, AnalysisError> {
        phase_lb(self.n_v, self.n_h)
    }

    /// Mean of per-bin estimates, as opposed to the pooled estimate.
    pub fn mean_phi(&self) -> Option<f64> {
        (self.phi_bins > 0).then(|| self.phi_sum / self.phi_bins as f64)
    }
}

/// Pools the measurement arm of every heralded bin.
pub fn pooled_heralded<'a, I>(bins: I, criteria: &HeraldCriteria, width_us: f64) -> Result<(PooledCounts, PhaseEstimate), AnalysisError>
where
    I: IntoIterator<Item = &'a BinRecord>,
{
    let mut pool = PooledCounts::default();
    for b in bins {
        if criteria.accepts_bin(b, width_us) {
            pool.add(b);
        }
    }
    if pool.n_bins == 0 {
        return Err(AnalysisError::NoHeraldedBins);
    }
    let est = pool.estimate()?;
    Ok((pool, est))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Ticks;

    fn bin(counts: [u64; 4]) -> BinRecord {
        BinRecord { bin_index: 0, t_start: Ticks::ZERO, counts, truth: None }
    }

    #[test]
    fn balanced_and_extreme_counts() {
        let e = phase_lb(50, 50).unwrap();
        assert!((e.phi_lb - PI / 2.0).abs() < 1e-15);
        // σ_c² = 4·50·50/100³ = 0.01.
        assert!((e.sigma_phi - 0.1).abs() < 1e-12);
        let e = phase_lb(0, 100).unwrap();
        assert_eq!(e.phi_lb, PI);
        assert!(e.sigma_phi > 0.0);
        assert!(e.interval.0 < PI && e.interval.1 == PI);
        assert!(matches!(phase_lb(0, 0), Err(AnalysisError::EmptyBin)));
    }

    #[test]
    fn pooled_bucket_at_24_counts() {
        let e = phase_lb(24, 24).unwrap();
        assert!((e.phi_lb - PI / 2.0).abs() < 1e-15);
        let expected = (4.0 * 24.0 * 24.0 / 48f64.powi(3)).sqrt();
        assert!((e.sigma_phi - expected).abs() < 1e-12);
    }

    #[test]
    fn interacting_fraction_closed_form() {
        assert_eq!(interacting_fraction(PI).unwrap(), 1.0);
        let f = interacting_fraction(0.687 * PI).unwrap();
        assert!((f - 0.777).abs() < 1e-3 && (f - 0.8).abs() < 0.05, "{f}");
        let phi = (2.0 * 0.2f64 - 1.0).acos();
        assert!((interacting_fraction(phi).unwrap() - 0.8).abs() < 1e-12);
        assert!(interacting_fraction(PI / 2.0).is_err());
        assert!(interacting_fraction(0.3).is_err());
    }

    #[test]
    fn open_criteria_select_everything() {
        let bins = vec![bin([0, 0, 1, 1]), bin([900, 0, 3, 0]), bin([0, 900, 0, 3])];
        assert_eq!(herald_select(&bins, &HeraldCriteria::open(), 100.0).len(), 3);
    }

    #[test]
    fn thresholds_are_inclusive() {
        let c = HeraldCriteria::default();
        // 10 counts in 100 µs = 100 kHz, 40 counts = 400 kHz.
        assert!(c.accepts_bin(&bin([40, 10, 0, 0]), 100.0));
        assert!(!c.accepts_bin(&bin([41, 10, 0, 0]), 100.0));
        assert!(!c.accepts_bin(&bin([40, 9, 0, 0]), 100.0));
        let single = HeraldCriteria { mode: HeraldMode::Single, ..c };
        assert!(single.accepts_bin(&bin([90, 10, 0, 0]), 100.0));
    }

    #[test]
    fn rate_conversion_is_exact_on_bucket_edges() {
        assert_eq!(rate_khz(24, 100.0), 240.0);
        assert_eq!(rate_khz(17, 100.0), 170.0);
        assert_eq!(rate_khz(3, 25.0), 120.0);
    }

    #[test]
    fn empty_selection_is_an_error() {
        let bins = vec![bin([50, 1, 50, 0])];
        assert_eq!(pooled_heralded(&bins, &HeraldCriteria::default(), 100.0).unwrap_err(), AnalysisError::NoHeraldedBins);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn herald_ignores_measurement_arm(
                heralds in proptest::collection::vec((0u64..80, 0u64..40), 1..60),
                measures in proptest::collection::vec((0u64..80, 0u64..80), 60),
                rotation in 0usize..60,
            ) {
                let bins: Vec<BinRecord> = heralds.iter().zip(&measures).map(|(h, m)| bin([h.0, h.1, m.0, m.1])).collect();
                let mut shuffled = bins.clone();
                let n = shuffled.len();
                for (k, b) in shuffled.iter_mut().enumerate() {
                    let m = measures[(k + rotation) % n];
                    b.counts[2] = m.0;
                    b.counts[3] = m.1;
                }
                let crit = HeraldCriteria::default();
                let a: Vec<bool> = bins.iter().map(|b| crit.accepts_bin(b, 100.0)).collect();
                let b: Vec<bool> = shuffled.iter().map(|b| crit.accepts_bin(b, 100.0)).collect();
                prop_assert_eq!(a, b);
            }

            #[test]
            fn pooling_is_associative(parts in proptest::collection::vec((0u64..100, 0u64..100), 2..30), split in 1usize..29) {
                let split = split.min(parts.len() - 1);
                let mut whole = PooledCounts::default();
                let (mut left, mut right) = (PooledCounts::default(), PooledCounts::default());
                for (k, (v, h)) in parts.iter().enumerate() {
                    whole.add_counts(*v, *h);
                    if k < split { left.add_counts(*v, *h) } else { right.add_counts(*v, *h) }
                }
                left.merge(&right);
                prop_assert_eq!((whole.n_v, whole.n_h, whole.n_bins), (left.n_v, left.n_h, left.n_bins));
                let total_v: u64 = parts.iter().map(|p| p.0).sum();
                let total_h: u64 = parts.iter().map(|p| p.1).sum();
                if total_v + total_h > 0 {
                    prop_assert_eq!(left.estimate().unwrap(), phase_lb(total_v, total_h).unwrap());
                }
            }

            #[test]
            fn estimate_in_range(v in 0u64..10_000, h in 0u64..10_000) {
                prop_assume!(v + h > 0);
                let e = phase_lb(v, h).unwrap();
                prop_assert!((0.0..=PI).contains(&e.phi_lb));
                prop_assert!(e.sigma_phi > 0.0);
                prop_assert!(e.interval.0 <= e.phi_lb && e.phi_lb <= e.interval.1);
            }
        }
    }
}
