//! Binned-counts CSV, the toolkit's interchange format.
//!
//! `bin_index,t_start_us,apd1,apd2,apd3,apd4` optionally followed by
//! `truth_detuning_ueV,truth_spin,truth_phase_rad`. UTF-8, LF endings.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::detection::{BinRecord, BinTruth};
use crate::dynamics::Ticks;
use crate::optics::Spin;

pub const BASE_COLUMNS: [&str; 6] = ["bin_index", "t_start_us", "apd1", "apd2", "apd3", "apd4"];
pub const TRUTH_COLUMNS: [&str; 3] = ["truth_detuning_ueV", "truth_spin", "truth_phase_rad"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("bad header: {0}")]
    Header(String),
    #[error("{0}")]
    Malformed(String),
}

pub fn header(include_truth: bool) -> String {
    let mut cols: Vec<&str> = BASE_COLUMNS.to_vec();
    if include_truth {
        cols.extend(TRUTH_COLUMNS);
    }
    cols.join(",")
}

pub fn write_bin<W: Write>(w: &mut W, b: &BinRecord, include_truth: bool) -> io::Result<()> {
    let [a1, a2, a3, a4] = b.counts;
    write!(w, "{},{},{a1},{a2},{a3},{a4}", b.bin_index, b.t_start)?;
    if include_truth {
        match &b.truth {
            Some(t) => write!(w, ",{:.6},{},{:.9}", t.detuning, t.spin.as_str(), t.phase)?,
            None => write!(w, ",,,")?,
        }
    }
    writeln!(w)
}

pub fn write_bins<W: Write>(mut w: W, bins: &[BinRecord], include_truth: bool) -> io::Result<()> {
    writeln!(w, "{}", header(include_truth))?;
    for b in bins {
        write_bin(&mut w, b, include_truth)?;
    }
    w.flush()
}

/// Streaming reader that validates the schema row by row.
pub struct BinReader<R: Read> {
    inner: csv::Reader<R>,
    has_truth: bool,
    record: csv::StringRecord,
}

impl<R: Read> BinReader<R> {
    pub fn new(reader: R) -> Result<Self, DataError> {
        let mut inner = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
        let headers = inner.headers().map_err(|e| DataError::Header(e.to_string()))?.clone();
        let names: Vec<&str> = headers.iter().collect();
        let has_truth = match names.len() {
            6 => false,
            9 => true,
            n => return Err(DataError::Header(format!("expected 6 or 9 columns, found {n}"))),
        };
        let expected: Vec<&str> = BASE_COLUMNS.iter().chain(TRUTH_COLUMNS.iter()).take(names.len()).copied().collect();
        if names != expected {
            return Err(DataError::Header(format!("expected `{}`, found `{}`", expected.join(","), names.join(","))));
        }
        Ok(Self { inner, has_truth, record: csv::StringRecord::new() })
    }

    pub fn has_truth(&self) -> bool {
        self.has_truth
    }

    fn parse(&self) -> Result<BinRecord, DataError> {
        let line = self.record.position().map_or(0, |p| p.line());
        let err = |message: String| DataError::Row { line, message };
        let expected = if self.has_truth { 9 } else { 6 };
        if self.record.len() != expected {
            return Err(err(format!("expected {expected} columns, found {}", self.record.len())));
        }
        let field = |k: usize| self.record.get(k).unwrap_or("").trim();
        let count = |k: usize| -> Result<u64, DataError> {
            let s = field(k);
            if s.starts_with('-') {
                return Err(err(format!("negative count `{s}` in {}", BASE_COLUMNS[k])));
            }
            s.parse::<u64>().map_err(|_| err(format!("invalid count `{s}` in {}", BASE_COLUMNS[k])))
        };
        let bin_index = field(0).parse::<u64>().map_err(|_| err(format!("invalid bin_index `{}`", field(0))))?;
        let t_us: f64 = field(1).parse().map_err(|_| err(format!("invalid t_start_us `{}`", field(1))))?;
        let t_start = Ticks::from_us_exact(t_us).filter(|t| t.0 >= 0).ok_or_else(|| err(format!("t_start_us `{}` is not a non-negative multiple of 0.1", field(1))))?;
        let counts = [count(2)?, count(3)?, count(4)?, count(5)?];
        let truth = if self.has_truth && !field(6).is_empty() {
            let detuning: f64 = field(6).parse().map_err(|_| err(format!("invalid truth_detuning_ueV `{}`", field(6))))?;
            let spin: Spin = field(7).parse().map_err(|e: String| err(e))?;
            let phase: f64 = field(8).parse().map_err(|_| err(format!("invalid truth_phase_rad `{}`", field(8))))?;
            Some(BinTruth { detuning, spin, phase, expected_counts: None })
        } else {
            None
        };
        Ok(BinRecord { bin_index, t_start, counts, truth })
    }
}

impl<R: Read> Iterator for BinReader<R> {
    type Item = Result<BinRecord, DataError>;

    fn next(&mut self) -> Option<Self::Item> {
        match self.inner.read_record(&mut self.record) {
            Ok(true) => Some(self.parse()),
            Ok(false) => None,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                Some(Err(DataError::Row { line, message: e.to_string() }))
            }
        }
    }
}
