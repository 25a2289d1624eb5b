//! Herald-rate histograms of the measured phase.
//!
//! Accumulators hold integer pools per bucket, so merging partial
//! histograms gives the same pooled counts in any order; per-bin phase sums
//! are merged in caller order.

use std::collections::BTreeMap;
use std::io::{self, Write};

use crate::detection::BinRecord;
use crate::herald::{rate_khz, AnalysisError, PooledCounts};

/// Mean measured phase against APD-2 rate.
#[derive(Debug, Clone, PartialEq)]
pub struct RateBucketHistogram {
    bucket_khz: f64,
    buckets: BTreeMap<i64, PooledCounts>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BucketRow {
    pub lo_khz: f64,
    pub hi_khz: f64,
    pub pooled: PooledCounts,
    pub phi_lb: Option<f64>,
    pub sigma: Option<f64>,
}

impl RateBucketHistogram {
    pub const DEFAULT_BUCKET_KHZ: f64 = 10.0;

    pub fn new(bucket_khz: f64) -> Result<Self, AnalysisError> {
        if !(bucket_khz > 0.0 && bucket_khz.is_finite()) {
            return Err(AnalysisError::InvalidEdges(format!("bucket width {bucket_khz} kHz")));
        }
        Ok(Self { bucket_khz, buckets: BTreeMap::new() })
    }

    pub fn add(&mut self, bin: &BinRecord, width_us: f64) {
        let apd2 = rate_khz(bin.counts[1], width_us);
        let key = (apd2 / self.bucket_khz).floor() as i64;
        self.buckets.entry(key).or_default().add(bin);
    }

    pub fn merge(&mut self, other: &RateBucketHistogram) {
        for (k, p) in &other.buckets {
            self.buckets.entry(*k).or_default().merge(p);
        }
    }

    pub fn total_bins(&self) -> u64 {
        self.buckets.values().map(|p| p.n_bins).sum()
    }

    pub fn rows(&self) -> Vec<BucketRow> {
        self.buckets
            .iter()
            .map(|(&k, p)| {
                let est = p.estimate().ok();
                BucketRow {
                    lo_khz: k as f64 * self.bucket_khz,
                    hi_khz: (k + 1) as f64 * self.bucket_khz,
                    pooled: *p,
                    phi_lb: est.map(|e| e.phi_lb),
                    sigma: est.map(|e| e.sigma_phi),
                }
            })
            .collect()
    }

    /// Row whose bucket contains `rate_khz`.
    pub fn row_at(&self, rate_khz: f64) -> Option<BucketRow> {
        let key = (rate_khz / self.bucket_khz).floor() as i64;
        self.rows().into_iter().find(|r| (r.lo_khz / self.bucket_khz).round() as i64 == key)
    }

    /// `bucket_lo_khz,bucket_hi_khz,n_bins,pooled_v,pooled_h,phi_lb_rad,sigma_rad`
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "bucket_lo_khz,bucket_hi_khz,n_bins,pooled_v,pooled_h,phi_lb_rad,sigma_rad")?;
        for r in self.rows() {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.lo_khz,
                r.hi_khz,
                r.pooled.n_bins,
                r.pooled.n_v,
                r.pooled.n_h,
                fmt_opt(r.phi_lb),
                fmt_opt(r.sigma)
            )?;
        }
        Ok(())
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NaN".to_owned(), |x| format!("{x:.9}"))
}

/// Strictly increasing bucket edges.
#[derive(Debug, Clone, PartialEq)]
pub struct Edges(Vec<f64>);

impl Edges {
    pub fn new(edges: Vec<f64>) -> Result<Self, AnalysisError> {
        if edges.len() < 2 {
            return Err(AnalysisError::InvalidEdges("need at least two edges".into()));
        }
        if !edges.windows(2).all(|w| w[0] < w[1]) || edges.iter().any(|e| e.is_nan()) {
            return Err(AnalysisError::InvalidEdges("edges must be strictly increasing".into()));
        }
        Ok(Self(edges))
    }

    /// `0, step, 2·step, …` up to the first edge at or above `max`.
    pub fn uniform(step: f64, max: f64) -> Result<Self, AnalysisError> {
        if !(step > 0.0 && max > 0.0 && (max / step) < 1e6) {
            return Err(AnalysisError::InvalidEdges(format!("uniform edges step={step} max={max}")));
        }
        let n = (max / step).ceil() as usize;
        Self::new((0..=n).map(|k| k as f64 * step).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    fn cells(&self) -> usize {
        self.0.len() - 1
    }

    /// Half-open `[lo, hi)` cell containing `x`.
    fn locate(&self, x: f64) -> Option<usize> {
        let k = self.0.partition_point(|e| *e <= x);
        (k >= 1 && k < self.0.len()).then(|| k - 1)
    }
}

/// Phase against the `(APD-1, APD-2)` rate plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram2D {
    x_edges: Edges,
    y_edges: Edges,
    cells: Vec<PooledCounts>,
    /// Bins that fell outside the edges.
    pub overflow: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub apd1_lo: f64,
    pub apd1_hi: f64,
    pub apd2_lo: f64,
    pub apd2_hi: f64,
    pub pooled: PooledCounts,
}

impl Cell {
    pub fn phi_lb(&self) -> Option<f64> {
        self.pooled.estimate().ok().map(|e| e.phi_lb)
    }
}

impl Histogram2D {
    pub const DEFAULT_APD1_CELL_KHZ: f64 = 25.0;
    pub const DEFAULT_APD2_CELL_KHZ: f64 = 10.0;
    pub const DEFAULT_MAX_KHZ: f64 = 2000.0;

    pub fn new(x_edges: Edges, y_edges: Edges) -> Self {
        let n = x_edges.cells() * y_edges.cells();
        Self { x_edges, y_edges, cells: vec![PooledCounts::default(); n], overflow: 0 }
    }

    /// 25 kHz APD-1 × 10 kHz APD-2 cells covering `[0, 2 MHz)` on both axes.
    pub fn with_default_edges() -> Self {
        Self::new(
            Edges::uniform(Self::DEFAULT_APD1_CELL_KHZ, Self::DEFAULT_MAX_KHZ).expect("valid default edges"),
            Edges::uniform(Self::DEFAULT_APD2_CELL_KHZ, Self::DEFAULT_MAX_KHZ).expect("valid default edges"),
        )
    }

    pub fn add(&mut self, bin: &BinRecord, width_us: f64) {
        let (a1, a2) = bin.herald();
        match (self.x_edges.locate(rate_khz(a1, width_us)), self.y_edges.locate(rate_khz(a2, width_us))) {
            (Some(i), Some(j)) => {
                let ny = self.y_edges.cells();
                self.cells[i * ny + j].add(bin)
            }
            _ => self.overflow += 1,
        }
    }

    pub fn merge(&mut self, other: &Histogram2D) -> Result<(), AnalysisError> {
        if self.x_edges != other.x_edges || self.y_edges != other.y_edges {
            return Err(AnalysisError::InvalidEdges("cannot merge histograms with different edges".into()));
        }
        for (a, b) in self.cells.iter_mut().zip(&other.cells) {
            a.merge(b);
        }
        self.overflow += other.overflow;
        Ok(())
    }

    pub fn total_bins(&self) -> u64 {
        self.cells.iter().map(|c| c.n_bins).sum::<u64>() + self.overflow
    }

    /// Non-empty cells in `(APD-1, APD-2)` order.
    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        let x = self.x_edges.as_slice();
        let y = self.y_edges.as_slice();
        let ny = self.y_edges.cells();
        self.cells.iter().enumerate().filter(|(_, p)| p.n_bins > 0).map(move |(k, p)| {
            let (i, j) = (k / ny, k % ny);
            Cell { apd1_lo: x[i], apd1_hi: x[i + 1], apd2_lo: y[j], apd2_hi: y[j + 1], pooled: *p }
        })
    }

    /// Unweighted mean of cell phases over non-empty cells matching `pred`.
    pub fn region_mean_phase<P: Fn(&Cell) -> bool>(&self, pred: P) -> Option<(f64, usize)> {
        let phases: Vec<f64> = self.cells().filter(|c| pred(c)).filter_map(|c| c.phi_lb()).collect();
        (!phases.is_empty()).then(|| (phases.iter().sum::<f64>() / phases.len() as f64, phases.len()))
    }

    /// Long format `apd1_lo,apd1_hi,apd2_lo,apd2_hi,n_bins,pooled_v,pooled_h,phi_lb_rad`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "apd1_lo,apd1_hi,apd2_lo,apd2_hi,n_bins,pooled_v,pooled_h,phi_lb_rad")?;
        for c in self.cells() {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                c.apd1_lo,
                c.apd1_hi,
                c.apd2_lo,
                c.apd2_hi,
                c.pooled.n_bins,
                c.pooled.n_v,
                c.pooled.n_h,
                fmt_opt(c.phi_lb())
            )?;
        }
        Ok(())
    }
}
