//! Timing of the merge step as a function of adapter count.
//!
//! One timed call is [`combine`]: mask sampling (for the dropout strategies)
//! plus the rescale and weighted sum, starting from precomputed adapter
//! outputs and base output. The direct strategy never samples masks.

use std::fmt::Write as _;
use std::ops::RangeInclusive;
use std::time::Instant;

use crate::error::Result;
use crate::merge::combine;
use crate::model::Strategy;
use crate::rng::{derive_stream, StreamKey};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub dims: Vec<usize>,
    pub k_range: RangeInclusive<usize>,
    pub repeats: usize,
    /// Timed calls per repeat.
    pub iters: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            dims: vec![4096],
            k_range: 1..=10,
            repeats: 5,
            iters: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub k: usize,
    pub d_out: usize,
    pub strategy: Strategy,
    pub mean_ns: f64,
    pub stddev_ns: f64,
    pub median_ns: f64,
}

/// Saturated rates `p_j = 1 - 1/k`, valid for every strategy.
pub fn bench_rates(k: usize) -> Vec<f64> {
    vec![1.0 - 1.0 / k as f64; k]
}

struct Case {
    strategy: Strategy,
    d_out: usize,
    k: usize,
    base: Vec<f32>,
    raw: Vec<Vec<f32>>,
    weights: Vec<f64>,
    rates: Vec<f64>,
    next_sample: u64,
    repeat_times: Vec<f64>,
}

impl Case {
    fn new(strategy: Strategy, d_out: usize, k: usize, seed: u64) -> Result<Self> {
        let mut st = derive_stream(StreamKey::new(seed, u64::MAX, d_out as u64, k as u64));
        let raw: Vec<Vec<f32>> = (0..k)
            .map(|_| (0..d_out).map(|_| st.uniform_f32(-1.0, 1.0)).collect())
            .collect();
        let base: Vec<f32> = (0..d_out).map(|_| st.uniform_f32(-1.0, 1.0)).collect();
        let mut case = Self {
            strategy,
            d_out,
            k,
            base,
            raw,
            weights: vec![1.0; k],
            rates: bench_rates(k),
            next_sample: 0,
            repeat_times: Vec::new(),
        };
        // Warm-up call also validates the configuration.
        std::hint::black_box(case.call(seed)?);
        Ok(case)
    }

    fn call(&mut self, seed: u64) -> Result<f32> {
        let keys = StreamKey::per_adapter(seed, 0, self.next_sample, self.k);
        let out = combine(self.strategy, &self.base, &self.raw, &self.weights, &self.rates, &keys)?;
        self.next_sample += 1;
        Ok(out.output[self.next_sample as usize % self.d_out])
    }

    /// One repeat: `iters` individually timed calls, summarized by their median.
    fn repeat(&mut self, iters: usize, seed: u64) -> Result<()> {
        let mut times = Vec::with_capacity(iters);
        for _ in 0..iters {
            let start = Instant::now();
            std::hint::black_box(self.call(seed)?);
            times.push(start.elapsed().as_nanos() as f64);
        }
        self.repeat_times.push(median(&mut times));
        Ok(())
    }

    fn row(mut self) -> BenchRow {
        let n = self.repeat_times.len() as f64;
        let mean = self.repeat_times.iter().sum::<f64>() / n;
        let var = if self.repeat_times.len() > 1 {
            self.repeat_times.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        BenchRow {
            k: self.k,
            d_out: self.d_out,
            strategy: self.strategy,
            mean_ns: mean,
            stddev_ns: var.sqrt(),
            median_ns: median(&mut self.repeat_times),
        }
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

/// Rows ordered by dimension, then strategy, then k.
///
/// Each repeat time is the median of `iters` timed calls; `mean_ns` and
/// `stddev_ns` are taken over repeats. Repeats run round-robin over all cases
/// so that a burst of machine noise is spread across k rather than landing
/// on one row.
pub fn run_benchmark(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    let mut cases = Vec::new();
    for &d in &cfg.dims {
        for strategy in [Strategy::Direct, Strategy::McDropout, Strategy::OrthogonalMcDropout] {
            for k in cfg.k_range.clone() {
                cases.push(Case::new(strategy, d, k, cfg.seed)?);
            }
        }
    }
    for _ in 0..cfg.repeats {
        for case in &mut cases {
            case.repeat(cfg.iters.max(1), cfg.seed)?;
        }
    }
    Ok(cases.into_iter().map(Case::row).collect())
}

pub const CSV_HEADER: &str = "k,d_out,strategy,mean_ns,stddev_ns";

pub fn rows_to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.1},{:.1}",
            r.k, r.d_out, r.strategy, r.mean_ns, r.stddev_ns
        );
    }
    out
}

/// Parses CSV written by [`rows_to_csv`]. The median column is not stored and
/// comes back equal to the mean.
pub fn rows_from_csv(text: &str) -> std::result::Result<Vec<BenchRow>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        other => return Err(format!("unexpected CSV header {other:?}")),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(format!("expected 5 columns in '{line}'"));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|e| format!("'{s}': {e}"));
            let mean = num(f[3])?;
            Ok(BenchRow {
                k: f[0].trim().parse().map_err(|e| format!("'{}': {e}", f[0]))?,
                d_out: f[1].trim().parse().map_err(|e| format!("'{}': {e}", f[1]))?,
                strategy: f[2].trim().parse()?,
                mean_ns: mean,
                stddev_ns: num(f[4])?,
                median_ns: mean,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub intercept: f64,
    pub slope: f64,
    pub r_squared: f64,
}

/// Ordinary least squares `y = intercept + slope · x`.
pub fn linear_fit(points: &[(f64, f64)]) -> LinearFit {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let r_squared = if syy > 0.0 { (sxy * sxy) / (sxx * syy) } else { 1.0 };
    LinearFit {
        intercept,
        slope,
        r_squared,
    }
}
