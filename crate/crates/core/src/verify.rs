//! Statistical certification of the mask constructions and an interference
//! analyzer for merged adapter outputs.
//!
//! Frequency checks pool over samples and coordinates and use a 4σ binomial
//! radius. Sample `n` of every suite draws adapter `j`'s mask from
//! `StreamKey(seed, 0, n, j)`; work is split into fixed-size chunks whose
//! partial results are folded in chunk order, so reports do not depend on the
//! thread count.

use std::collections::BTreeMap;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::mask::{sample_masks, MaskKind};
use crate::merge::{adapter_outputs, combine, dot};
use crate::model::{
    check_orthogonal_capacity, check_rates, keep_sum, validate_plan, BaseLayer, LowRankAdapter, MergePlan, Strategy,
    KEEP_SUM_TOLERANCE,
};
use crate::rng::{derive_stream, StreamKey};

/// Width of the binomial confidence radius, in standard deviations.
pub const CONFIDENCE_SIGMAS: f64 = 4.0;
pub const MIN_CONSISTENCY_POOL: u64 = 10_000;
pub const MIN_UNBIASEDNESS_SAMPLES: u64 = 10_000;
/// Pythagorean identity tolerance for orthogonal outputs (relative).
pub const PYTHAGOREAN_TOLERANCE: f64 = 1e-6;

const CHUNK: u64 = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub config: BTreeMap<String, Value>,
    pub passed: bool,
    pub statistics: BTreeMap<String, f64>,
    pub suite: String,
    pub trials: u64,
}

impl VerifyReport {
    fn new(suite: &str, trials: u64, config: BTreeMap<String, Value>) -> Self {
        Self {
            config,
            passed: true,
            statistics: BTreeMap::new(),
            suite: suite.to_string(),
            trials,
        }
    }

    fn stat(&mut self, name: impl Into<String>, value: f64) {
        self.statistics.insert(name.into(), value);
    }

    pub fn to_json(&self) -> String {
        crate::io::to_json(self)
    }
}

/// Runs `f` over `0..n` in chunks, in parallel, returning per-chunk results
/// in chunk order.
fn chunked<R, F>(n: u64, f: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(Range<u64>) -> Result<R> + Sync + Send,
{
    let ranges: Vec<Range<u64>> = (0..n.div_ceil(CHUNK))
        .map(|c| c * CHUNK..((c + 1) * CHUNK).min(n))
        .collect();
    ranges.into_par_iter().map(f).collect()
}

fn binomial_radius(p: f64, pool: u64) -> f64 {
    CONFIDENCE_SIGMAS * (p * (1.0 - p) / pool as f64).sqrt()
}

fn base_config(rates: &[f64], d_out: usize, n_samples: u64, seed: u64) -> BTreeMap<String, Value> {
    BTreeMap::from([
        ("d_out".to_string(), json!(d_out)),
        ("n_samples".to_string(), json!(n_samples)),
        ("rates".to_string(), json!(rates)),
        ("seed".to_string(), json!(seed)),
    ])
}

/// Pooled keep frequency of every orthogonal mask against `1 - p_j`.
pub fn run_consistency_suite(rates: &[f64], d_out: usize, n_samples: u64, seed: u64) -> Result<VerifyReport> {
    check_orthogonal_capacity(rates)?;
    let pool = n_samples.saturating_mul(d_out as u64);
    if pool < MIN_CONSISTENCY_POOL {
        return Err(Error::InsufficientSamples {
            required: MIN_CONSISTENCY_POOL,
            actual: pool,
        });
    }
    let k = rates.len();
    let partial = chunked(n_samples, |range| {
        let mut counts = vec![0u64; k];
        for n in range {
            let set = sample_masks(
                MaskKind::Orthogonal,
                rates,
                d_out,
                &StreamKey::per_adapter(seed, 0, n, k),
            )?;
            for (c, j) in counts.iter_mut().zip(0..k) {
                *c += set.count_ones(j);
            }
        }
        Ok(counts)
    })?;
    let mut counts = vec![0u64; k];
    for part in partial {
        for (c, p) in counts.iter_mut().zip(part) {
            *c += p;
        }
    }

    let mut report = VerifyReport::new("consistency", n_samples, base_config(rates, d_out, n_samples, seed));
    for (j, (&p, &ones)) in rates.iter().zip(&counts).enumerate() {
        let expected = 1.0 - p;
        let freq = ones as f64 / pool as f64;
        let radius = binomial_radius(p, pool);
        let deviation = (freq - expected).abs();
        report.stat(format!("adapter_{j:02}.deviation"), deviation);
        report.stat(format!("adapter_{j:02}.expected"), expected);
        report.stat(format!("adapter_{j:02}.frequency"), freq);
        report.stat(format!("adapter_{j:02}.radius"), radius);
        if expected > 0.0 {
            // Mean of mask / (1 - p): the rescaled expectation, ideally 1.
            report.stat(format!("adapter_{j:02}.rescaled_mean"), freq / expected);
        }
        report.passed &= deviation <= radius;
    }
    Ok(report)
}

/// Largest pairwise mask inner product over all samples and pairs, plus the
/// same check on masked random contributions. Passes iff both are exactly 0.
///
/// With `MaskKind::Independent` the suite runs on plain dropout masks, which
/// overlap; that configuration is the negative control.
pub fn run_orthogonality_suite(
    rates: &[f64],
    d_out: usize,
    n_samples: u64,
    seed: u64,
    kind: MaskKind,
) -> Result<VerifyReport> {
    match kind {
        MaskKind::Orthogonal => check_orthogonal_capacity(rates)?,
        MaskKind::Independent => check_rates(rates)?,
    }
    let k = rates.len();
    let partial = chunked(n_samples, |range| {
        let (mut max_mask, mut max_contrib) = (0u64, 0f64);
        for n in range {
            let set = sample_masks(kind, rates, d_out, &StreamKey::per_adapter(seed, 0, n, k))?;
            max_mask = max_mask.max(set.max_pairwise_dot());
            // Random adapter outputs from a separate layer index.
            let masked: Vec<Vec<f32>> = (0..k)
                .map(|j| {
                    let mut st = derive_stream(StreamKey::new(seed, 1, n, j as u64));
                    set.masks[j]
                        .iter()
                        .map(|&m| m as f32 * st.uniform_f32(-1.0, 1.0))
                        .collect()
                })
                .collect();
            for i in 0..k {
                for j in i + 1..k {
                    max_contrib = max_contrib.max(dot(&masked[i], &masked[j]).abs());
                }
            }
        }
        Ok((max_mask, max_contrib))
    })?;
    let (max_mask, max_contrib) = partial
        .into_iter()
        .fold((0u64, 0f64), |(a, b), (c, d)| (a.max(c), b.max(d)));

    let mut config = base_config(rates, d_out, n_samples, seed);
    config.insert("mask_kind".into(), json!(kind));
    let mut report = VerifyReport::new("orthogonality", n_samples, config);
    report.stat("max_abs_contribution_dot", max_contrib);
    report.stat("max_mask_dot", max_mask as f64);
    report.stat("pairs", (k * k.saturating_sub(1) / 2) as f64);
    report.passed = max_mask == 0 && max_contrib == 0.0;
    Ok(report)
}

/// For rates whose keep rates sum to one, every coordinate must be kept by
/// exactly one mask in every sample.
pub fn run_partition_suite(rates: &[f64], d_out: usize, n_samples: u64, seed: u64) -> Result<VerifyReport> {
    check_orthogonal_capacity(rates)?;
    let sum = keep_sum(rates);
    if (sum - 1.0).abs() > KEEP_SUM_TOLERANCE {
        return Err(Error::NotSaturated { keep_sum: sum });
    }
    let k = rates.len();
    let partial = chunked(n_samples, |range| {
        let (mut bad_samples, mut bad_coords) = (0u64, 0u64);
        for n in range {
            let set = sample_masks(
                MaskKind::Orthogonal,
                rates,
                d_out,
                &StreamKey::per_adapter(seed, 0, n, k),
            )?;
            let misses = set.coverage().iter().filter(|&&c| c != 1).count() as u64;
            bad_coords += misses;
            bad_samples += u64::from(misses > 0);
        }
        Ok((bad_samples, bad_coords))
    })?;
    let (bad_samples, bad_coords) = partial.into_iter().fold((0, 0), |(a, b), (c, d)| (a + c, b + d));
    let mut report = VerifyReport::new("partition", n_samples, base_config(rates, d_out, n_samples, seed));
    report.stat("violating_coordinates", bad_coords as f64);
    report.stat("violating_samples", bad_samples as f64);
    report.passed = bad_samples == 0;
    Ok(report)
}

/// Relative L2 error between the mean of `n_samples` stochastic merges and
/// the direct merge. Passes iff the error is at most `max(0.01, 5/√n)`.
pub fn run_unbiasedness_suite(
    plan: &MergePlan,
    adapters: &[LowRankAdapter],
    base: &BaseLayer,
    h: &[f32],
    n_samples: u64,
) -> Result<VerifyReport> {
    validate_plan(plan, adapters)?;
    if n_samples < MIN_UNBIASEDNESS_SAMPLES {
        return Err(Error::InsufficientSamples {
            required: MIN_UNBIASEDNESS_SAMPLES,
            actual: n_samples,
        });
    }
    let refs = plan.resolve(adapters)?;
    let raw = adapter_outputs(&refs, h)?;
    let d_out = refs[0].d_out();
    let base_part = base.apply(h, d_out)?;
    let (weights, rates) = (plan.weights(), plan.rates());
    let k = plan.len();

    let direct = combine(Strategy::Direct, &base_part, &raw, &weights, &[], &[])?.output;
    let partial = chunked(n_samples, |range| {
        let mut sum = vec![0f64; d_out];
        for n in range {
            let keys = StreamKey::per_adapter(plan.seed, 0, n, k);
            let out = combine(plan.strategy, &base_part, &raw, &weights, &rates, &keys)?;
            for (s, &v) in sum.iter_mut().zip(&out.output) {
                *s += v as f64;
            }
        }
        Ok(sum)
    })?;
    let mut sum = vec![0f64; d_out];
    for part in partial {
        for (s, p) in sum.iter_mut().zip(part) {
            *s += p;
        }
    }
    let n = n_samples as f64;
    let err2: f64 = sum.iter().zip(&direct).map(|(&s, &d)| (s / n - d as f64).powi(2)).sum();
    let norm2: f64 = direct.iter().map(|&d| (d as f64).powi(2)).sum();
    let error = if norm2 > 0.0 {
        (err2 / norm2).sqrt()
    } else {
        err2.sqrt()
    };
    let threshold = f64::max(0.01, 5.0 / n.sqrt());

    let mut config = base_config(&rates, d_out, n_samples, plan.seed);
    config.insert("strategy".into(), json!(plan.strategy));
    config.insert("weights".into(), json!(weights));
    let mut report = VerifyReport::new("unbiasedness", n_samples, config);
    report.stat("direct_norm", norm2.sqrt());
    report.stat("relative_l2_error", error);
    report.stat("threshold", threshold);
    report.passed = error <= threshold;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCosine {
    /// `None` when either vector is zero.
    pub cosine: Option<f64>,
    pub i: usize,
    pub j: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyInterference {
    pub contribution_cosines: Vec<PairCosine>,
    /// `‖Σ y_j‖ / Σ ‖y_j‖`, descriptive only.
    pub norm_ratio: Option<f64>,
    /// `|‖Σ w_j y_j‖² − Σ w_j² ‖y_j‖²| / Σ w_j² ‖y_j‖²`; zero up to rounding
    /// exactly when contributions are pairwise orthogonal.
    pub pythagorean_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputInterference {
    pub index: usize,
    pub raw_cosines: Vec<PairCosine>,
    pub strategies: BTreeMap<String, StrategyInterference>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterferenceReport {
    pub inputs: Vec<InputInterference>,
    pub rates: Vec<f64>,
    pub seed: u64,
    /// Strategies that could not run for these rates, with the reason.
    pub skipped: BTreeMap<String, String>,
    pub weights: Vec<f64>,
}

impl InterferenceReport {
    pub fn to_json(&self) -> String {
        crate::io::to_json(self)
    }
}

fn norm(v: &[f32]) -> f64 {
    dot(v, v).sqrt()
}

pub fn cosine(a: &[f32], b: &[f32]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some(dot(a, b) / (na * nb))
    }
}

fn pair_cosines(vs: &[Vec<f32>]) -> Vec<PairCosine> {
    let k = vs.len();
    (0..k)
        .flat_map(|i| (i + 1..k).map(move |j| (i, j)))
        .map(|(i, j)| PairCosine {
            cosine: cosine(&vs[i], &vs[j]),
            i,
            j,
        })
        .collect()
}

fn strategy_stats(ys: &[Vec<f32>], weights: &[f64]) -> StrategyInterference {
    let d = ys.first().map_or(0, Vec::len);
    let mut plain = vec![0f64; d];
    let mut weighted = vec![0f64; d];
    for (y, &w) in ys.iter().zip(weights) {
        for ((p, q), &v) in plain.iter_mut().zip(weighted.iter_mut()).zip(y) {
            *p += v as f64;
            *q += w * v as f64;
        }
    }
    let norm_sum: f64 = ys.iter().map(|y| norm(y)).sum();
    let plain_norm = plain.iter().map(|v| v * v).sum::<f64>().sqrt();
    let lhs: f64 = weighted.iter().map(|v| v * v).sum();
    let rhs: f64 = ys.iter().zip(weights).map(|(y, &w)| w * w * dot(y, y)).sum();
    let gap = if rhs > 0.0 { (lhs - rhs).abs() / rhs } else { lhs };
    StrategyInterference {
        contribution_cosines: pair_cosines(ys),
        norm_ratio: (norm_sum > 0.0).then(|| plain_norm / norm_sum),
        pythagorean_gap: gap,
    }
}

/// Geometry of adapter outputs before and after each strategy's transform.
/// Input `n` samples its masks from `StreamKey(seed, 0, n, j)`.
pub fn analyze_interference(
    adapters: &[LowRankAdapter],
    weights: &[f64],
    rates: &[f64],
    inputs: &[Vec<f32>],
    seed: u64,
) -> Result<InterferenceReport> {
    let k = adapters.len();
    if k == 0 {
        return Err(Error::EmptyPlan);
    }
    if weights.len() != k {
        return Err(Error::dims("interference weights", k, weights.len()));
    }
    if rates.len() != k {
        return Err(Error::dims("interference rates", k, rates.len()));
    }
    let refs: Vec<&LowRankAdapter> = adapters.iter().collect();
    let mut skipped = BTreeMap::new();
    let mut records = Vec::with_capacity(inputs.len());
    for (n, h) in inputs.iter().enumerate() {
        let raw = adapter_outputs(&refs, h)?;
        let zeros = vec![0f32; raw[0].len()];
        let keys = StreamKey::per_adapter(seed, 0, n as u64, k);
        let mut strategies = BTreeMap::new();
        for strategy in [Strategy::Direct, Strategy::McDropout, Strategy::OrthogonalMcDropout] {
            match combine(strategy, &zeros, &raw, weights, rates, &keys) {
                Ok(out) => {
                    strategies.insert(strategy.to_string(), strategy_stats(&out.contributions, weights));
                }
                Err(e @ (Error::ConstraintViolation { .. } | Error::InvalidRate { .. })) => {
                    skipped.insert(strategy.to_string(), e.to_string());
                }
                Err(e) => return Err(e),
            }
        }
        records.push(InputInterference {
            index: n,
            raw_cosines: pair_cosines(&raw),
            strategies,
        });
    }
    Ok(InterferenceReport {
        inputs: records,
        rates: rates.to_vec(),
        seed,
        skipped,
        weights: weights.to_vec(),
    })
}
