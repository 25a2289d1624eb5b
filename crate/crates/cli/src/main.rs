use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use qdphase::config::{ConfigError, ExperimentConfig};
use qdphase::experiment::{
    dwell_report, run_analyze, run_simulate, run_sweep, AnalyzeOptions, SimulateOptions, SweepPlan, SweepSource,
    DEFAULT_DWELL_COUNT, DEFAULT_DWELL_WINDOW_UEV,
};
use qdphase::herald::{HeraldCriteria, HeraldMode};
use qdphase::timescale::{SweepStatistic, SweepTarget};
use qdphase::{Error, Result};

#[derive(Parser)]
#[command(name = "qdphase", version, about = "Simulate and analyze heralded polarization-rotation measurements")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (dotted-key TOML). Defaults to the built-in device.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output path (file, or directory for `analyze`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `detection.bin_width_us`, or the inferred width for `analyze`.
    #[arg(long = "bin-width-us")]
    bin_width_us: Option<f64>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct Herald {
    #[arg(long = "apd2-min-khz", default_value_t = 100.0)]
    apd2_min_khz: f64,
    #[arg(long = "apd1-max-khz", default_value_t = 400.0)]
    apd1_max_khz: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::Double)]
    mode: ModeArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Single,
    Double,
}

impl Herald {
    fn criteria(&self) -> HeraldCriteria {
        let mode = match self.mode {
            ModeArg::Single => HeraldMode::Single,
            ModeArg::Double => HeraldMode::Double,
        };
        HeraldCriteria { apd2_min_khz: self.apd2_min_khz, apd1_max_khz: self.apd1_max_khz, mode }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StatisticArg {
    ExcessVariance,
    HeraldPhaseExcess,
    Autocorrelation,
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Rebin,
    Resample,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    Spin,
    Jitter,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a binned four-detector count stream.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Write lab-format CSV without truth columns.
        #[arg(long)]
        no_truth: bool,
        /// Also dump the detuning/spin trajectory here.
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Heralded phase analysis of a binned CSV.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        herald: Herald,
        /// Binned-counts CSV to read.
        #[arg(long)]
        counts: PathBuf,
        /// Width of the APD-2 rate buckets, kHz.
        #[arg(long = "bucket-khz", default_value_t = 10.0)]
        bucket_khz: f64,
    },
    /// Timescale extraction from bin-width sweeps or autocorrelation.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        herald: Herald,
        /// Comma-separated bin widths in µs.
        #[arg(long, value_delimiter = ',', default_value = "25,50,100,200,400,800,1600,3200")]
        widths: Vec<f64>,
        #[arg(long, value_enum, default_value_t = StatisticArg::ExcessVariance)]
        statistic: StatisticArg,
        #[arg(long, value_enum, default_value_t = SourceArg::Rebin)]
        source: SourceArg,
        #[arg(long, value_enum, default_value_t = TargetArg::Spin)]
        target: TargetArg,
        /// APD index (1-4) the count statistics are read from.
        #[arg(long, default_value_t = 2)]
        apd: usize,
        /// Largest autocorrelation lag, in bins.
        #[arg(long = "max-lag", default_value_t = 60)]
        max_lag: usize,
    },
    /// Fraction of time the detuning sits inside a small window.
    Dwell {
        #[command(flatten)]
        common: Common,
        /// Half-width of the window, µeV.
        #[arg(long = "window-ueV", default_value_t = DEFAULT_DWELL_WINDOW_UEV)]
        window_uev: f64,
        #[arg(long, default_value_t = DEFAULT_DWELL_COUNT)]
        dwells: usize,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::from_path(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.run.seed = seed;
    }
    if let Some(w) = common.bin_width_us {
        cfg.detection.bin_width = w;
    }
    cfg.validate()?;
    if let Some(w) = cfg.cavity_warning() {
        eprintln!("warning: {w}");
    }
    Ok(cfg)
}

fn require_out(common: &Common) -> Result<&Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| ConfigError::Invalid { field: "--out".into(), reason: "an output path is required".into() }.into())
}

fn channel(apd: usize) -> Result<usize> {
    if (1..=4).contains(&apd) {
        Ok(apd - 1)
    } else {
        Err(ConfigError::Invalid { field: "--apd".into(), reason: format!("{apd} is not in 1..=4") }.into())
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate { common, no_truth, trajectory } => {
            let cfg = load_config(&common)?;
            let out = require_out(&common)?;
            let m = run_simulate(&cfg, out, &SimulateOptions { without_truth: no_truth, trajectory_out: trajectory })?;
            println!("wrote {} ({} s)", m.outputs.join(", "), m.wall_clock_s);
        }
        Command::Analyze { common, herald, counts, bucket_khz } => {
            let out = require_out(&common)?;
            let opts = AnalyzeOptions { criteria: herald.criteria(), bin_width_us: common.bin_width_us, bucket_khz };
            let (report, _) = run_analyze(&counts, out, &opts)?;
            print!("{}", report.summary());
        }
        Command::Sweep { common, herald, widths, statistic, source, target, apd, max_lag } => {
            let cfg = load_config(&common)?;
            let out = require_out(&common)?;
            let channel = channel(apd)?;
            let source = match source {
                SourceArg::Rebin => SweepSource::Rebin,
                SourceArg::Resample => SweepSource::Resample,
            };
            let plan = match statistic {
                StatisticArg::ExcessVariance => SweepPlan::Widths { widths, statistic: SweepStatistic::ExcessVariance { channel }, source },
                StatisticArg::HeraldPhaseExcess => {
                    SweepPlan::Widths { widths, statistic: SweepStatistic::HeraldPhaseExcess { criteria: herald.criteria() }, source }
                }
                StatisticArg::Autocorrelation => SweepPlan::Autocorrelation { channel, max_lag },
            };
            let target = match target {
                TargetArg::Spin => SweepTarget::Spin,
                TargetArg::Jitter => SweepTarget::Jitter,
            };
            let (result, _) = run_sweep(&cfg, &plan, target, out)?;
            let bound = if result.at_upper_bound { " (upper bound: no resolvable knee)" } else { "" };
            println!("{}: fitted timescale {:.3} us, residual {:.3e}{bound}", result.statistic, result.fitted_timescale, result.fit_residual);
        }
        Command::Dwell { common, window_uev, dwells } => {
            let cfg = load_config(&common)?;
            let report = dwell_report(&cfg.jitter, window_uev, dwells, cfg.seed())?;
            print!("{}", report.summary());
            if let Some(out) = &common.out {
                let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
                text.push('\n');
                std::fs::write(out, text).map_err(Error::io(format!("writing {}", out.display())))?;
            }
        }
    }
    Ok(())
}

fn threads(command: &Command) -> Option<usize> {
    match command {
        Command::Simulate { common, .. } | Command::Analyze { common, .. } | Command::Sweep { common, .. } | Command::Dwell { common, .. } => {
            common.threads
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = threads(&cli.command) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
