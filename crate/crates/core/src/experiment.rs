//! Run orchestration: config in, files out.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{ConfigError, ExperimentConfig};
use crate::csvio::{self, BinReader, DataError};
use crate::detection::{rebin, sample_bins, sample_bins_keyed, BinRecord, DetectionConfig};
use crate::dynamics::{JitterParams, JitterProcess, RandomSeed, Ticks, Trajectory};
use crate::error::{Error, Result};
use crate::herald::{interacting_fraction, AnalysisError, HeraldCriteria, PhaseEstimate, PooledCounts};
use crate::histogram::{RateBucketHistogram, Histogram2D};
use crate::manifest::RunManifest;
use crate::optics::{resonance_dwell_fraction, GAUSSIAN_FWHM_PER_SIGMA};
use crate::timescale::{fit_autocorrelation_time, rate_autocorrelation, timescale_sweep, SweepResult, SweepStatistic, SweepTarget};

/// Lower APD-1 edge of the off-resonance region, kHz.
pub const OFF_RESONANCE_APD1_MIN_KHZ: f64 = 400.0;
/// Upper APD-2 edge of the off-resonance region, kHz.
pub const OFF_RESONANCE_APD2_MAX_KHZ: f64 = 50.0;

pub const DEFAULT_DWELL_WINDOW_UEV: f64 = 0.015;
pub const DEFAULT_DWELL_COUNT: usize = 4_000_000;

pub struct Simulation {
    pub trajectory: Trajectory,
    pub bins: Vec<BinRecord>,
}

pub fn simulate(cfg: &ExperimentConfig) -> Result<Simulation> {
    cfg.validate()?;
    let seed = cfg.seed();
    let trajectory = Trajectory::generate(&cfg.jitter, &cfg.spin, cfg.horizon(), seed)?;
    let bins = sample_bins(&cfg.model, &cfg.detection, &trajectory, seed)?;
    Ok(Simulation { trajectory, bins })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(Error::io(format!("creating {}", path.display())))
}

fn file_name(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn finish(mut manifest: RunManifest, started: Instant, anchor: &Path) -> Result<RunManifest> {
    manifest.wall_clock_s = started.elapsed().as_secs_f64();
    manifest.write(anchor)?;
    Ok(manifest)
}

#[derive(Debug, Clone, Default)]
pub struct SimulateOptions {
    /// Omit the truth columns, giving the lab format.
    pub without_truth: bool,
    /// Also write the segment list here.
    pub trajectory_out: Option<PathBuf>,
}

/// Simulates `cfg`, writes the binned CSV to `out` and its manifest beside it.
pub fn run_simulate(cfg: &ExperimentConfig, out: &Path, opts: &SimulateOptions) -> Result<RunManifest> {
    let started = Instant::now();
    let sim = simulate(cfg)?;
    let mut manifest = RunManifest::new("simulate", cfg);
    let w = create(out)?;
    csvio::write_bins(w, &sim.bins, !opts.without_truth).map_err(Error::io(format!("writing {}", out.display())))?;
    manifest.outputs.push(file_name(out));
    if let Some(path) = &opts.trajectory_out {
        let mut w = create(path)?;
        sim.trajectory.write_csv(&mut w).and_then(|_| w.flush()).map_err(Error::io(format!("writing {}", path.display())))?;
        manifest.outputs.push(file_name(path));
    }
    finish(manifest, started, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AnalyzeOptions {
    pub criteria: HeraldCriteria,
    /// Forces the bin width instead of inferring it from `t_start_us`.
    pub bin_width_us: Option<f64>,
    pub bucket_khz: f64,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        Self { criteria: HeraldCriteria::default(), bin_width_us: None, bucket_khz: RateBucketHistogram::DEFAULT_BUCKET_KHZ }
    }
}

#[derive(Debug, Clone)]
pub struct AnalysisReport {
    pub bin_width_us: f64,
    pub n_bins: u64,
    pub rate_buckets: RateBucketHistogram,
    pub rate_plane: Histogram2D,
    pub hot_spot_counts: PooledCounts,
    pub hot_spot: PhaseEstimate,
    /// Fails when the hot-spot phase is at or below π/2.
    pub interacting_fraction: std::result::Result<f64, AnalysisError>,
    /// Mean cell phase and cell count of the off-resonance region.
    pub off_resonance: Option<(f64, usize)>,
}

impl AnalysisReport {
    pub fn summary(&self) -> String {
        let pi = std::f64::consts::PI;
        let e = &self.hot_spot;
        let mut s = format!(
            "bins: {} at {} us\nheralded bins: {}\nhot-spot phi_LB: {:.6} rad ({:.4} pi) +/- {:.6} rad, interval [{:.4} pi, {:.4} pi]\n",
            self.n_bins,
            self.bin_width_us,
            self.hot_spot_counts.n_bins,
            e.phi_lb,
            e.phi_lb / pi,
            e.sigma_phi,
            e.interval.0 / pi,
            e.interval.1 / pi
        );
        match &self.interacting_fraction {
            Ok(f) => s.push_str(&format!("interacting fraction: {f:.4}\n")),
            Err(err) => s.push_str(&format!("interacting fraction: unavailable ({err})\n")),
        }
        match self.off_resonance {
            Some((phi, cells)) => s.push_str(&format!("off-resonance mean phi_LB: {:.4} pi over {cells} cells\n", phi / pi)),
            None => s.push_str("off-resonance mean phi_LB: no populated cells\n"),
        }
        s
    }
}

fn off_resonance_mean(h: &Histogram2D) -> Option<(f64, usize)> {
    h.region_mean_phase(|c| c.apd1_lo >= OFF_RESONANCE_APD1_MIN_KHZ && c.apd2_hi <= OFF_RESONANCE_APD2_MAX_KHZ)
}

/// One streaming pass over binned records. Memory is bounded by the
/// histogram sizes.
pub fn analyze_stream<I>(bins: I, opts: &AnalyzeOptions) -> Result<AnalysisReport>
where
    I: IntoIterator<Item = std::result::Result<BinRecord, DataError>>,
{
    let mut rate_buckets = RateBucketHistogram::new(opts.bucket_khz)?;
    let mut rate_plane = Histogram2D::with_default_edges();
    let mut hot = PooledCounts::default();
    let mut width = match opts.bin_width_us {
        Some(w) if !(w > 0.0 && w.is_finite()) => {
            return Err(ConfigError::Invalid { field: "bin_width_us".into(), reason: "must be positive and finite".into() }.into())
        }
        w => w,
    };
    let mut pending: Option<BinRecord> = None;
    let mut previous: Option<Ticks> = None;
    let mut n_bins = 0u64;

    let mut consume = |b: &BinRecord, w: f64| {
        rate_buckets.add(b, w);
        rate_plane.add(b, w);
        if opts.criteria.accepts_bin(b, w) {
            hot.add(b);
        }
        n_bins += 1;
    };

    for row in bins {
        let b = row?;
        if let Some(p) = previous {
            if b.t_start <= p {
                return Err(DataError::Malformed(format!("bin {} starts at {} us, not after the previous bin at {} us", b.bin_index, b.t_start, p)).into());
            }
        }
        if width.is_none() {
            match pending.take() {
                None => {
                    previous = Some(b.t_start);
                    pending = Some(b);
                    continue;
                }
                Some(first) => {
                    let w = (b.t_start - first.t_start).as_us();
                    width = Some(w);
                    consume(&first, w);
                }
            }
        }
        previous = Some(b.t_start);
        consume(&b, width.expect("width known"));
    }
    if pending.is_some() {
        return Err(DataError::Malformed("cannot infer the bin width from a single bin; pass it explicitly".into()).into());
    }
    let Some(bin_width_us) = width else {
        return Err(DataError::Malformed("no data rows".into()).into());
    };
    if hot.n_bins == 0 {
        return Err(AnalysisError::NoHeraldedBins.into());
    }
    let hot_spot = hot.estimate()?;
    Ok(AnalysisReport {
        bin_width_us,
        n_bins,
        interacting_fraction: interacting_fraction(hot_spot.phi_lb),
        off_resonance: off_resonance_mean(&rate_plane),
        rate_buckets,
        rate_plane,
        hot_spot_counts: hot,
        hot_spot,
    })
}

pub fn analyze_bins(bins: &[BinRecord], opts: &AnalyzeOptions) -> Result<AnalysisReport> {
    analyze_stream(bins.iter().cloned().map(Ok), opts)
}

#[derive(Serialize)]
struct ReportFile<'a> {
    bin_width_us: f64,
    n_bins: u64,
    heralded_bins: u64,
    pooled_v: u64,
    pooled_h: u64,
    phi_lb_rad: f64,
    sigma_phi_rad: f64,
    interval_rad: (f64, f64),
    interacting_fraction: Option<f64>,
    interacting_fraction_error: Option<String>,
    off_resonance_phi_lb_rad: Option<f64>,
    off_resonance_cells: usize,
    criteria: &'a HeraldCriteria,
}

/// Reads `counts`, writes `phase_vs_apd2.csv`, `phase_rate_plane.csv` and `report.json` into
/// `out_dir`, plus `report.json.manifest.json`.
pub fn run_analyze(counts: &Path, out_dir: &Path, opts: &AnalyzeOptions) -> Result<(AnalysisReport, RunManifest)> {
    let started = Instant::now();
    let file = File::open(counts).map_err(Error::io(format!("opening {}", counts.display())))?;
    let reader = BinReader::new(BufReader::new(file))?;
    let report = analyze_stream(reader, opts)?;

    std::fs::create_dir_all(out_dir).map_err(Error::io(format!("creating {}", out_dir.display())))?;
    let settings = serde_json::to_string(opts).expect("options serialize");
    let mut manifest = RunManifest::for_settings("analyze", hex::encode(Sha256::digest(settings.as_bytes())));

    let buckets_path = out_dir.join("phase_vs_apd2.csv");
    let mut w = create(&buckets_path)?;
    report.rate_buckets.write_csv(&mut w).and_then(|_| w.flush()).map_err(Error::io(format!("writing {}", buckets_path.display())))?;
    let plane_path = out_dir.join("phase_rate_plane.csv");
    let mut w = create(&plane_path)?;
    report.rate_plane.write_csv(&mut w).and_then(|_| w.flush()).map_err(Error::io(format!("writing {}", plane_path.display())))?;

    let e = &report.hot_spot;
    let body = ReportFile {
        bin_width_us: report.bin_width_us,
        n_bins: report.n_bins,
        heralded_bins: report.hot_spot_counts.n_bins,
        pooled_v: e.n_v,
        pooled_h: e.n_h,
        phi_lb_rad: e.phi_lb,
        sigma_phi_rad: e.sigma_phi,
        interval_rad: e.interval,
        interacting_fraction: report.interacting_fraction.as_ref().ok().copied(),
        interacting_fraction_error: report.interacting_fraction.as_ref().err().map(|e| e.to_string()),
        off_resonance_phi_lb_rad: report.off_resonance.map(|r| r.0),
        off_resonance_cells: report.off_resonance.map_or(0, |r| r.1),
        criteria: &opts.criteria,
    };
    let json_path = out_dir.join("report.json");
    let mut text = serde_json::to_string_pretty(&body).expect("report serializes");
    text.push('\n');
    std::fs::write(&json_path, text).map_err(Error::io(format!("writing {}", json_path.display())))?;

    manifest.outputs = vec![file_name(&buckets_path), file_name(&plane_path), file_name(&json_path)];
    let manifest = finish(manifest, started, &json_path)?;
    Ok((report, manifest))
}

/// How each sweep width obtains its bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepSource {
    /// Sample once at the narrowest width and sum consecutive bins.
    Rebin,
    /// Re-sample the same trajectory at every width with fresh count noise.
    Resample,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SweepPlan {
    Widths { widths: Vec<f64>, statistic: SweepStatistic, source: SweepSource },
    /// Rate autocorrelation at the config bin width, lags `1..=max_lag`.
    Autocorrelation { channel: usize, max_lag: usize },
}

fn detection_at(cfg: &DetectionConfig, width: f64) -> DetectionConfig {
    DetectionConfig { bin_width: width, ..*cfg }
}

pub fn sweep(cfg: &ExperimentConfig, plan: &SweepPlan, target: SweepTarget) -> Result<SweepResult> {
    cfg.validate()?;
    let seed = cfg.seed();
    let trajectory = Trajectory::generate(&cfg.jitter, &cfg.spin, cfg.horizon(), seed)?;
    match plan {
        SweepPlan::Widths { widths, statistic, source } => {
            if widths.is_empty() {
                return Err(AnalysisError::InvalidSweep("no bin widths given".into()).into());
            }
            for &w in widths {
                if !(w > 0.0) || Ticks::from_us_exact(w).is_none() {
                    return Err(ConfigError::Invalid { field: "widths".into(), reason: format!("{w} is not a positive multiple of 0.1 us") }.into());
                }
            }
            match source {
                SweepSource::Rebin => {
                    let base = Ticks::from_us(widths[0]);
                    let mut factors = Vec::with_capacity(widths.len());
                    for &w in widths {
                        let t = Ticks::from_us(w);
                        if t.0 % base.0 != 0 {
                            return Err(ConfigError::Invalid {
                                field: "widths".into(),
                                reason: format!("{w} us is not a multiple of the narrowest width {} us", widths[0]),
                            }
                            .into());
                        }
                        factors.push((t.0 / base.0) as usize);
                    }
                    let fine = sample_bins(&cfg.model, &detection_at(&cfg.detection, widths[0]), &trajectory, seed)?;
                    let mut k = 0;
                    Ok(timescale_sweep(
                        |_| {
                            let f = factors[k];
                            k += 1;
                            Ok::<_, Error>(if f == 1 { fine.clone() } else { rebin(&fine, f) })
                        },
                        widths,
                        *statistic,
                        target,
                    )?)
                }
                SweepSource::Resample => {
                    let mut k = 0u64;
                    Ok(timescale_sweep(
                        |w| {
                            k += 1;
                            sample_bins_keyed(&cfg.model, &detection_at(&cfg.detection, w), &trajectory, seed, k)
                        },
                        widths,
                        *statistic,
                        target,
                    )?)
                }
            }
        }
        SweepPlan::Autocorrelation { channel, max_lag } => {
            let bins = sample_bins(&cfg.model, &cfg.detection, &trajectory, seed)?;
            let rho = rate_autocorrelation(&bins, *channel, *max_lag)?;
            let width = cfg.detection.bin_width;
            let fit = fit_autocorrelation_time(&rho, width)?;
            let scale = match target {
                SweepTarget::Spin => 2.0,
                SweepTarget::Jitter => 1.0,
            };
            Ok(SweepResult {
                statistic: "autocorrelation",
                bin_widths: (1..rho.len()).map(|k| k as f64 * width).collect(),
                contrast: rho[1..].to_vec(),
                contrast_err: vec![1.0 / (bins.len() as f64).sqrt(); rho.len() - 1],
                fitted_timescale: fit.timescale * scale,
                fit_residual: fit.relative_residual,
                at_upper_bound: fit.at_upper_bound,
            })
        }
    }
}

pub fn run_sweep(cfg: &ExperimentConfig, plan: &SweepPlan, target: SweepTarget, out: &Path) -> Result<(SweepResult, RunManifest)> {
    let started = Instant::now();
    let result = sweep(cfg, plan, target)?;
    let mut w = create(out)?;
    result.write_csv(&mut w).and_then(|_| w.flush()).map_err(Error::io(format!("writing {}", out.display())))?;
    let mut manifest = RunManifest::new("sweep", cfg);
    manifest.outputs.push(file_name(out));
    let manifest = finish(manifest, started, out)?;
    Ok((result, manifest))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DwellReport {
    #[serde(rename = "window_ueV")]
    pub window: f64,
    pub analytic: f64,
    pub monte_carlo: f64,
    /// `|mc − analytic| / analytic`; NaN when the analytic value is 0.
    pub relative_difference: f64,
    pub dwells: usize,
}

impl DwellReport {
    pub fn summary(&self) -> String {
        format!(
            "window: +/-{} ueV\nanalytic fraction: {:.6e}\nmonte carlo fraction: {:.6e} ({} dwells)\nrelative difference: {:.4}\n",
            self.window, self.analytic, self.monte_carlo, self.dwells, self.relative_difference
        )
    }
}

fn analytic_dwell(jitter: &JitterParams, window: f64) -> Result<f64> {
    let c = jitter.center;
    if jitter.inhomogeneous_fwhm == 0.0 {
        return Ok(if c.abs() <= window { 1.0 } else { 0.0 });
    }
    if c == 0.0 {
        return Ok(resonance_dwell_fraction(jitter.inhomogeneous_fwhm, window)?);
    }
    if window.is_infinite() {
        return Ok(1.0);
    }
    let s = jitter.inhomogeneous_fwhm / GAUSSIAN_FWHM_PER_SIGMA * std::f64::consts::SQRT_2;
    Ok(0.5 * (libm::erf((window - c) / s) + libm::erf((window + c) / s)))
}

/// Analytic versus time-weighted Monte Carlo fraction of time the detuning
/// spends inside `±window` µeV.
pub fn dwell_report(jitter: &JitterParams, window: f64, dwells: usize, seed: RandomSeed) -> Result<DwellReport> {
    jitter.validate()?;
    if !(window > 0.0) {
        return Err(ConfigError::Invalid { field: "window_ueV".into(), reason: "must be positive".into() }.into());
    }
    if dwells == 0 {
        return Err(ConfigError::Invalid { field: "dwells".into(), reason: "must be positive".into() }.into());
    }
    let analytic = analytic_dwell(jitter, window)?;
    let (mut inside, mut total, mut used) = (0i128, 0i128, 0usize);
    for (_, duration, detuning) in JitterProcess::new(*jitter, seed).take(dwells) {
        used += 1;
        let Some(d) = duration else {
            inside = i128::from(detuning.abs() <= window);
            total = 1;
            break;
        };
        total += i128::from(d.0);
        if detuning.abs() <= window {
            inside += i128::from(d.0);
        }
    }
    let monte_carlo = inside as f64 / total as f64;
    let relative_difference = if analytic > 0.0 { (monte_carlo - analytic).abs() / analytic } else { f64::NAN };
    Ok(DwellReport { window, analytic, monte_carlo, relative_difference, dwells: used })
}

/// Reads the whole of `path` and returns its SHA-256, hex encoded.
pub fn hash_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(Error::io(format!("opening {}", path.display())))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(Error::io(format!("reading {}", path.display())))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}
