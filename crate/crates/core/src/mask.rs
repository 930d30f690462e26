//! Dropout mask sampling.
//!
//! Two samplers share one layout: adapter `j` draws its `z^(j)` from the
//! stream for `stream_keys[j]`, consuming exactly `d_out` uniforms in
//! coordinate order whatever its keep probability.
//!
//! * [`sample_mc_masks`]: independent masks, `m^(j) = z^(j)` with
//!   `z^(j)_i ~ Ber(1 - p_j)`.
//! * [`sample_orthogonal_masks`]: chained masks. `z^(j)_i ~ Ber(q_j)` and
//!   `m^(j) = acc ⊙ z^(j)`, `acc ← acc ⊙ (1 - z^(j))`, which makes the masks
//!   pairwise disjoint while each `m^(j)_i` stays marginally `Ber(1 - p_j)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_orthogonal_capacity, check_rates, KEEP_SUM_TOLERANCE};
use crate::rng::{derive_stream, StreamKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Independent,
    Orthogonal,
}

/// Binary masks for `k` adapters over `d_out` coordinates, stored one byte
/// per entry.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub kind: MaskKind,
    pub masks: Vec<Vec<u8>>,
    pub raw_draws: Vec<Vec<u8>>,
    pub keep_probs: Vec<f64>,
    pub dropout_rates: Vec<f64>,
}

impl MaskSet {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn d_out(&self) -> usize {
        self.masks.first().map_or(0, Vec::len)
    }

    /// Integer inner product `m^(i) · m^(j)`.
    pub fn dot(&self, i: usize, j: usize) -> u64 {
        self.masks[i]
            .iter()
            .zip(&self.masks[j])
            .map(|(&a, &b)| (a & b) as u64)
            .sum()
    }

    /// Largest pairwise mask inner product; 0 when `k < 2`.
    pub fn max_pairwise_dot(&self) -> u64 {
        let k = self.len();
        (0..k)
            .flat_map(|i| (i + 1..k).map(move |j| (i, j)))
            .map(|(i, j)| self.dot(i, j))
            .max()
            .unwrap_or(0)
    }

    /// `Σ_j m^(j)` per coordinate.
    pub fn coverage(&self) -> Vec<u32> {
        let mut cov = vec![0u32; self.d_out()];
        for m in &self.masks {
            for (c, &v) in cov.iter_mut().zip(m) {
                *c += v as u32;
            }
        }
        cov
    }

    /// Recomputes `(∏_{l<j} (1 - z^(l))) ⊙ z^(j)` from the raw draws.
    pub fn chained_from_raw(&self) -> Vec<Vec<u8>> {
        let d = self.d_out();
        let mut out = Vec::with_capacity(self.len());
        for j in 0..self.raw_draws.len() {
            let m = (0..d)
                .map(|i| {
                    let none_before = self.raw_draws[..j].iter().all(|z| z[i] == 0);
                    u8::from(none_before && self.raw_draws[j][i] == 1)
                })
                .collect();
            out.push(m);
        }
        out
    }

    /// Number of ones in mask `j`.
    pub fn count_ones(&self, j: usize) -> u64 {
        self.masks[j].iter().map(|&v| v as u64).sum()
    }
}

/// Conditional keep probability `q_j` for adapter `j` (1-based) of an
/// orthogonal plan: `q_1 = 1 - p_1`, otherwise `(1 - p_j) / D_j` with
/// `D_j = (Σ_{l<j} p_l) - (j - 2) = 1 - Σ_{l<j} (1 - p_l)`.
///
/// `D_j = 0` yields `q_j = 0`. Values within [`KEEP_SUM_TOLERANCE`] outside
/// `[0, 1]` are clamped, as are values within it below 1 (snapped to exactly
/// 1) so that a saturated plan partitions every coordinate.
pub fn keep_probability(j: usize, rates: &[f64]) -> Result<f64> {
    if j == 0 || j > rates.len() {
        return Err(Error::dims("keep probability index", rates.len(), j));
    }
    let keep = 1.0 - rates[j - 1];
    let remaining = 1.0 - rates[..j - 1].iter().map(|p| 1.0 - p).sum::<f64>();
    let q = if j == 1 {
        keep
    } else if remaining <= 0.0 {
        if keep <= KEEP_SUM_TOLERANCE {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        keep / remaining
    };
    if !(-KEEP_SUM_TOLERANCE..=1.0 + KEEP_SUM_TOLERANCE).contains(&q) {
        return Err(Error::InvalidRate {
            index: j - 1,
            rate: rates[j - 1],
            reason: "conditional keep probability falls outside [0, 1]",
        });
    }
    Ok(if q >= 1.0 - KEEP_SUM_TOLERANCE { 1.0 } else { q.max(0.0) })
}

fn check_keys(rates: &[f64], stream_keys: &[StreamKey]) -> Result<()> {
    if stream_keys.len() != rates.len() {
        return Err(Error::dims("mask stream keys", rates.len(), stream_keys.len()));
    }
    Ok(())
}

fn draw(q: f64, d_out: usize, key: StreamKey) -> Vec<u8> {
    let mut stream = derive_stream(key);
    // `u < q` with `u = (x >> 11) · 2^-53` is `x >> 11 < ceil(q · 2^53)`; the
    // scaling is exact, so this matches `Stream::bernoulli` draw for draw.
    let threshold = (q * (1u64 << 53) as f64).ceil() as u64;
    (0..d_out)
        .map(|_| u8::from(stream.next_u64() >> 11 < threshold))
        .collect()
}

/// Independent Monte-Carlo dropout masks.
pub fn sample_mc_masks(rates: &[f64], d_out: usize, stream_keys: &[StreamKey]) -> Result<MaskSet> {
    check_rates(rates)?;
    check_keys(rates, stream_keys)?;
    let keep_probs: Vec<f64> = rates.iter().map(|p| 1.0 - p).collect();
    let raw_draws: Vec<Vec<u8>> = keep_probs
        .iter()
        .zip(stream_keys)
        .map(|(&q, &key)| draw(q, d_out, key))
        .collect();
    Ok(MaskSet {
        kind: MaskKind::Independent,
        masks: raw_draws.clone(),
        raw_draws,
        keep_probs,
        dropout_rates: rates.to_vec(),
    })
}

/// Orthogonal (pairwise disjoint) masks via chained Bernoulli draws.
pub fn sample_orthogonal_masks(rates: &[f64], d_out: usize, stream_keys: &[StreamKey]) -> Result<MaskSet> {
    check_orthogonal_capacity(rates)?;
    check_keys(rates, stream_keys)?;
    let keep_probs = (1..=rates.len())
        .map(|j| keep_probability(j, rates))
        .collect::<Result<Vec<_>>>()?;

    let mut acc = vec![1u8; d_out];
    let mut masks = Vec::with_capacity(rates.len());
    let mut raw_draws = Vec::with_capacity(rates.len());
    for (&q, &key) in keep_probs.iter().zip(stream_keys) {
        let z = draw(q, d_out, key);
        let m: Vec<u8> = acc
            .iter_mut()
            .zip(&z)
            .map(|(a, &b)| {
                let kept = *a & b;
                *a &= 1 - b;
                kept
            })
            .collect();
        masks.push(m);
        raw_draws.push(z);
    }
    Ok(MaskSet {
        kind: MaskKind::Orthogonal,
        masks,
        raw_draws,
        keep_probs,
        dropout_rates: rates.to_vec(),
    })
}

pub fn sample_masks(kind: MaskKind, rates: &[f64], d_out: usize, stream_keys: &[StreamKey]) -> Result<MaskSet> {
    match kind {
        MaskKind::Independent => sample_mc_masks(rates, d_out, stream_keys),
        MaskKind::Orthogonal => sample_orthogonal_masks(rates, d_out, stream_keys),
    }
}

/// JSON mask dump: `{"keep_probs", "masks", "rates", "seed"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskDump {
    pub keep_probs: Vec<f64>,
    pub masks: Vec<Vec<u8>>,
    pub rates: Vec<f64>,
    pub seed: u64,
}

impl MaskDump {
    pub fn new(set: &MaskSet, seed: u64) -> Self {
        Self {
            keep_probs: set.keep_probs.clone(),
            masks: set.masks.clone(),
            rates: set.dropout_rates.clone(),
            seed,
        }
    }
}
