//! Spin-lifetime and jitter-time extraction.
//!
//! Two routes are provided. A bin-width sweep reads the excess count
//! variance of a channel as a function of bin width (or, optionally, the
//! herald-selected phase excess). The rate autocorrelation reads the decay
//! of bin-to-bin correlations at a fixed width.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::detection::BinRecord;
use crate::fit::{fit_exponential_decay, fit_exponential_knee, fit_telegraph_knee, FitError, TimescaleFit};
use crate::herald::{phase_lb, AnalysisError, HeraldCriteria};

/// Relative RMS residual above which a sweep fit is rejected.
pub const MAX_FIT_RESIDUAL: f64 = 0.25;

/// Upper timescale bound as a multiple of the widest bin.
pub const TIMESCALE_BOUND_FACTOR: f64 = 100.0;

/// Biased empirical autocorrelation of per-bin counts on `channel`
/// (0-based APD index), normalized to lag 0. Returns `max_lag + 1` values.
pub fn rate_autocorrelation(bins: &[BinRecord], channel: usize, max_lag: usize) -> Result<Vec<f64>, AnalysisError> {
    let needed = 10 * max_lag.max(1);
    if bins.len() < needed {
        return Err(AnalysisError::StreamTooShort { len: bins.len(), needed });
    }
    let xs: Vec<f64> = bins.iter().map(|b| b.counts[channel] as f64).collect();
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let centered: Vec<f64> = xs.iter().map(|x| x - mean).collect();
    let c0: f64 = centered.iter().map(|x| x * x).sum::<f64>();
    if c0 == 0.0 {
        return Err(AnalysisError::ZeroVariance { channel });
    }
    Ok((0..=max_lag)
        .map(|k| centered.iter().zip(&centered[k..]).map(|(a, b)| a * b).sum::<f64>() / c0)
        .collect())
}

/// Fits `ρ(k·w) = A·exp(−k·w/τ)` over lags `1..=ρ.len()−1`; lag 0 carries
/// the white Poisson variance and is excluded.
pub fn fit_autocorrelation_time(rho: &[f64], bin_width_us: f64) -> Result<TimescaleFit, AnalysisError> {
    if rho.len() < 4 {
        return Err(FitError::InsufficientPoints { needed: 3, got: rho.len().saturating_sub(1) }.into());
    }
    let lags: Vec<f64> = (1..rho.len()).map(|k| k as f64 * bin_width_us).collect();
    let fit = fit_exponential_decay(&lags, &rho[1..], TIMESCALE_BOUND_FACTOR * lags[lags.len() - 1])?;
    check_fit(&fit)?;
    Ok(fit)
}

fn check_fit(fit: &TimescaleFit) -> Result<(), AnalysisError> {
    if !(fit.timescale > 0.0) {
        return Err(FitError::NonPositiveTimescale(fit.timescale).into());
    }
    if fit.relative_residual > MAX_FIT_RESIDUAL {
        return Err(FitError::ResidualTooLarge { residual: fit.relative_residual, threshold: MAX_FIT_RESIDUAL }.into());
    }
    Ok(())
}

/// Per-width statistic of a bin-width sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepStatistic {
    /// `(Var N − ⟨N⟩) / (⟨N⟩ · w)` on one APD, fitted with the exact
    /// bin-averaged exponential-correlation knee. The fitted constant is the
    /// correlation time of the rate modulation.
    ExcessVariance { channel: usize },
    /// Mean per-bin `φ_LB` of heralded bins minus the mean over all bins,
    /// fitted with `C·exp(−w/τ) + C₀`.
    HeraldPhaseExcess { criteria: HeraldCriteria },
}

impl SweepStatistic {
    pub fn name(&self) -> &'static str {
        match self {
            SweepStatistic::ExcessVariance { .. } => "excess-variance",
            SweepStatistic::HeraldPhaseExcess { .. } => "herald-phase-excess",
        }
    }
}

/// Which process the sweep is read as probing, fixing how a correlation
/// time maps onto the reported timescale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepTarget {
    /// Symmetric spin telegraph: correlation time is `T1/2`.
    Spin,
    /// Renewal jitter: correlation time equals the mean dwell.
    Jitter,
}

impl SweepTarget {
    fn dwell_per_correlation_time(self) -> f64 {
        match self {
            SweepTarget::Spin => 2.0,
            SweepTarget::Jitter => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    /// `excess-variance`, `herald-phase-excess` or `autocorrelation`.
    pub statistic: &'static str,
    pub bin_widths: Vec<f64>,
    pub contrast: Vec<f64>,
    pub contrast_err: Vec<f64>,
    /// Mean dwell of the probed process, µs.
    pub fitted_timescale: f64,
    pub fit_residual: f64,
    /// No resolvable knee; `fitted_timescale` is the upper bound sentinel.
    pub at_upper_bound: bool,
}

impl SweepResult {
    /// `bin_width_us,contrast,contrast_err` rows, then a footer row
    /// `fit_tau_us,<τ>,<residual>`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "bin_width_us,contrast,contrast_err")?;
        for ((x, c), e) in self.bin_widths.iter().zip(&self.contrast).zip(&self.contrast_err) {
            writeln!(w, "{x},{c:.9e},{e:.9e}")?;
        }
        writeln!(w, "fit_tau_us,{:.6},{:.6e}", self.fitted_timescale, self.fit_residual)
    }
}

fn excess_variance(bins: &[BinRecord], channel: usize, width_us: f64) -> (f64, f64) {
    let n = bins.len() as f64;
    let mean = bins.iter().map(|b| b.counts[channel] as f64).sum::<f64>() / n;
    let var = bins.iter().map(|b| (b.counts[channel] as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if mean == 0.0 {
        return (0.0, f64::INFINITY);
    }
    let scale = mean * width_us;
    ((var - mean) / scale, var * (2.0 / (n - 1.0)).sqrt() / scale)
}

fn herald_phase_excess(bins: &[BinRecord], criteria: &HeraldCriteria, width_us: f64) -> Result<(f64, f64), AnalysisError> {
    let mut all = (0.0, 0usize);
    let mut sel = Vec::new();
    for b in bins {
        let (v, h) = b.measure();
        let Ok(e) = phase_lb(v, h) else { continue };
        all.0 += e.phi_lb;
        all.1 += 1;
        if criteria.accepts_bin(b, width_us) {
            sel.push(e.phi_lb);
        }
    }
    if sel.len() < 2 {
        return Err(AnalysisError::NoHeraldedBins);
    }
    let m = sel.iter().sum::<f64>() / sel.len() as f64;
    let sd = (sel.iter().map(|p| (p - m).powi(2)).sum::<f64>() / (sel.len() - 1) as f64).sqrt();
    Ok((m - all.0 / all.1 as f64, sd / (sel.len() as f64).sqrt()))
}

/// Sweeps `widths` (µs) through `source` and fits the statistic's knee.
///
/// `source(w)` must return the bins of one stationary stream at width `w`.
pub fn timescale_sweep<F, E>(
    mut source: F,
    widths: &[f64],
    statistic: SweepStatistic,
    target: SweepTarget,
) -> Result<SweepResult, AnalysisError>
where
    F: FnMut(f64) -> Result<Vec<BinRecord>, E>,
    E: std::fmt::Display,
{
    if widths.len() < 4 {
        return Err(FitError::InsufficientPoints { needed: 4, got: widths.len() }.into());
    }
    if !widths.windows(2).all(|w| w[0] < w[1]) || widths[0] <= 0.0 {
        return Err(AnalysisError::InvalidSweep("bin widths must be positive and strictly increasing".into()));
    }
    if widths[widths.len() - 1] / widths[0] < 10.0 {
        return Err(AnalysisError::InvalidSweep("bin widths must span at least one decade".into()));
    }
    let mut contrast = Vec::with_capacity(widths.len());
    let mut errors = Vec::with_capacity(widths.len());
    for &w in widths {
        let bins = source(w).map_err(|e| AnalysisError::Source(e.to_string()))?;
        if bins.len() < 2 {
            return Err(AnalysisError::StreamTooShort { len: bins.len(), needed: 2 });
        }
        let (c, e) = match statistic {
            SweepStatistic::ExcessVariance { channel } => excess_variance(&bins, channel, w),
            SweepStatistic::HeraldPhaseExcess { criteria } => herald_phase_excess(&bins, &criteria, w)?,
        };
        contrast.push(c);
        errors.push(e);
    }
    let tau_max = TIMESCALE_BOUND_FACTOR * widths[widths.len() - 1];
    let flat = match statistic {
        SweepStatistic::ExcessVariance { .. } => contrast.iter().zip(&errors).all(|(c, e)| c.abs() < 3.0 * e),
        SweepStatistic::HeraldPhaseExcess { .. } => {
            let (lo, hi) = contrast.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &c| (a.min(c), b.max(c)));
            let err = errors.iter().copied().fold(0.0, f64::max);
            hi - lo < 3.0 * err
        }
    };
    let mut result = SweepResult {
        statistic: statistic.name(),
        bin_widths: widths.to_vec(),
        contrast,
        contrast_err: errors,
        fitted_timescale: tau_max,
        fit_residual: 0.0,
        at_upper_bound: true,
    };
    if flat {
        return Ok(result);
    }
    let finite_errors: Option<Vec<f64>> = result.contrast_err.iter().all(|e| e.is_finite()).then(|| result.contrast_err.clone());
    let (fit, scale) = match statistic {
        SweepStatistic::ExcessVariance { .. } => {
            let f = fit_telegraph_knee(widths, &result.contrast, finite_errors.as_deref(), tau_max)?;
            (f, target.dwell_per_correlation_time())
        }
        SweepStatistic::HeraldPhaseExcess { .. } => (fit_exponential_knee(widths, &result.contrast, finite_errors.as_deref(), tau_max)?, 1.0),
    };
    check_fit(&fit)?;
    result.fitted_timescale = fit.timescale * scale;
    result.fit_residual = fit.relative_residual;
    result.at_upper_bound = fit.at_upper_bound;
    Ok(result)
}
