use std::f64::consts::PI;

use qdphase::csvio::{write_bins, BinReader};
use qdphase::detection::BinRecord;
use qdphase::experiment::{analyze_bins, analyze_stream, simulate, AnalysisReport, AnalyzeOptions};
use qdphase::herald::{pooled_heralded, HeraldCriteria, HeraldMode, PooledCounts};
use qdphase::{ExperimentConfig, Spin};

fn config(horizon_us: f64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.run.horizon_us = horizon_us;
    cfg
}

fn csv(bins: &[BinRecord], truth: bool) -> Vec<u8> {
    let mut out = Vec::new();
    write_bins(&mut out, bins, truth).unwrap();
    out
}

fn analyze_bytes(bytes: &[u8]) -> AnalysisReport {
    analyze_stream(BinReader::new(bytes).unwrap(), &AnalyzeOptions::default()).unwrap()
}

fn same_estimates(a: &AnalysisReport, b: &AnalysisReport) {
    assert_eq!(a.hot_spot, b.hot_spot);
    assert_eq!(a.off_resonance, b.off_resonance);
    let (ra, rb) = (a.rate_buckets.rows(), b.rate_buckets.rows());
    assert_eq!(ra.len(), rb.len());
    for (x, y) in ra.iter().zip(&rb) {
        assert_eq!((x.pooled.n_v, x.pooled.n_h, x.phi_lb), (y.pooled.n_v, y.pooled.n_h, y.phi_lb));
    }
    let mut fa = Vec::new();
    let mut fb = Vec::new();
    a.rate_plane.write_csv(&mut fa).unwrap();
    b.rate_plane.write_csv(&mut fb).unwrap();
    assert_eq!(fa, fb);
}

#[test]
fn csv_round_trip_is_lossless() {
    let sim = simulate(&config(1e6)).unwrap();
    let bytes = csv(&sim.bins, true);
    let back: Vec<BinRecord> = BinReader::new(bytes.as_slice()).unwrap().collect::<Result<_, _>>().unwrap();
    assert_eq!(back.len(), sim.bins.len());
    for (a, b) in sim.bins.iter().zip(&back) {
        assert_eq!((a.bin_index, a.t_start, a.counts), (b.bin_index, b.t_start, b.counts));
        let (ta, tb) = (a.truth.unwrap(), b.truth.unwrap());
        assert_eq!(ta.spin, tb.spin);
        assert!((ta.detuning - tb.detuning).abs() <= 5e-7);
    }
}

#[test]
fn estimates_ignore_truth_columns() {
    let sim = simulate(&config(2e6)).unwrap();
    let with = analyze_bytes(&csv(&sim.bins, true));
    let without = analyze_bytes(&csv(&sim.bins, false));
    same_estimates(&with, &without);

    // shuffled truth
    let mut shuffled = sim.bins.clone();
    let n = shuffled.len();
    for k in 0..n {
        let j = (k * 7919 + 13) % n;
        let t = shuffled[k].truth;
        shuffled[k].truth = shuffled[j].truth;
        shuffled[j].truth = t;
    }
    same_estimates(&with, &analyze_bytes(&csv(&shuffled, true)));
    same_estimates(&with, &analyze_bins(&sim.bins, &AnalyzeOptions::default()).unwrap());
}

fn purity(bins: &[BinRecord], crit: &HeraldCriteria, gamma: f64) -> Option<f64> {
    let sel: Vec<&BinRecord> = bins.iter().filter(|b| crit.accepts_bin(b, 100.0)).collect();
    if sel.is_empty() {
        return None;
    }
    let good = sel
        .iter()
        .filter(|b| {
            let t = b.truth.unwrap();
            t.spin == Spin::Down && t.detuning.abs() < gamma / 2.0
        })
        .count();
    Some(good as f64 / sel.len() as f64)
}

#[test]
fn stricter_heralding_raises_phase_and_purity() {
    let cfg = config(1e7);
    let sim = simulate(&cfg).unwrap();
    let mut last_phi = 0.0;
    let mut last_purity = 0.0;
    for threshold in [0.0, 50.0, 100.0, 150.0, 200.0] {
        let crit = HeraldCriteria { apd2_min_khz: threshold, apd1_max_khz: f64::INFINITY, mode: HeraldMode::Single };
        let (_, est) = pooled_heralded(&sim.bins, &crit, 100.0).unwrap();
        let p = purity(&sim.bins, &crit, cfg.model.gamma_total).unwrap();
        assert!(est.phi_lb > last_phi, "threshold {threshold}: {} after {last_phi}", est.phi_lb);
        assert!(p >= last_purity, "threshold {threshold}: purity {p} after {last_purity}");
        last_phi = est.phi_lb;
        last_purity = p;
    }
    assert!(last_purity > 0.5, "{last_purity}");
}

#[test]
fn unheralded_pool_sits_well_below_the_hot_spot() {
    let sim = simulate(&config(1e7)).unwrap();
    let (_, all) = pooled_heralded(&sim.bins, &HeraldCriteria::open(), 100.0).unwrap();
    let (_, hot) = pooled_heralded(&sim.bins, &HeraldCriteria::default(), 100.0).unwrap();
    assert!(all.phi_lb < 0.15 * PI, "{}", all.phi_lb / PI);
    assert!(hot.phi_lb > all.phi_lb + 5.0 * hot.sigma_phi);
}

#[test]
fn pooled_estimate_converges_to_the_intensity_ratio() {
    // Counts drawn at fixed expected intensities; pooled estimate → arccos of the ratio.
    let mut cfg = config(1e7);
    cfg.jitter.inhomogeneous_fwhm = 0.0;
    cfg.spin.t1 = f64::INFINITY;
    cfg.spin.initial_spin = qdphase::dynamics::InitialSpin::Down;
    let sim = simulate(&cfg).unwrap();
    let expected = sim.bins[0].truth.unwrap().expected_counts.unwrap();
    let truth = ((expected[2] - expected[3]) / (expected[2] + expected[3])).acos();
    let mut prev_err = f64::INFINITY;
    for n in [1_000usize, 10_000, 100_000] {
        let mut pool = PooledCounts::default();
        for b in &sim.bins[..n] {
            pool.add(b);
        }
        let e = pool.estimate().unwrap();
        assert!((e.phi_lb - truth).abs() < 4.0 * e.sigma_phi, "n={n}: {} vs {truth} ± {}", e.phi_lb, e.sigma_phi);
        assert!(e.sigma_phi < prev_err);
        prev_err = e.sigma_phi;
    }
}
