//! Output-space merging: `f(h) = W h + Σ_j w_j y_j`, where the adapter outputs
//! `x_j = ΔW_j h` pass through a transform first. The transform is the
//! identity (direct merge), independent dropout, or orthogonal dropout, with
//! kept coordinates rescaled by `1 / (1 - p_j)`.
//!
//! Plan order is merge order. The orthogonal construction assigns earlier
//! adapters first, so which coordinates land on which adapter depends on
//! order; each adapter's marginal keep rate does not.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{sample_mc_masks, sample_orthogonal_masks, MaskSet};
use crate::model::{apply_adapter, check_rates, validate_plan, BaseLayer, LowRankAdapter, MergePlan, Strategy};
use crate::rng::StreamKey;

#[derive(Debug, Clone, PartialEq)]
pub struct MergeOutput {
    pub strategy: Strategy,
    /// `f(h)`.
    pub output: Vec<f32>,
    /// `W h`, zeros when the base layer is absent.
    pub base_part: Vec<f32>,
    /// `y_j` after masking and rescaling, before weighting.
    pub contributions: Vec<Vec<f32>>,
    pub mask_set: Option<MaskSet>,
}

impl MergeOutput {
    pub fn d_out(&self) -> usize {
        self.output.len()
    }

    /// Recomputes `W h + Σ_j w_j y_j` from the stored parts.
    pub fn recombine(&self, weights: &[f64]) -> Vec<f32> {
        weighted_sum(&self.base_part, &self.contributions, weights)
    }

    /// `y_i · y_j` accumulated in f64.
    pub fn contribution_dot(&self, i: usize, j: usize) -> f64 {
        dot(&self.contributions[i], &self.contributions[j])
    }

    pub fn audit(&self, weights: &[f64], rates: &[f64], seed: u64) -> MergeAudit {
        MergeAudit {
            base_part: self.base_part.clone(),
            contributions: self.contributions.clone(),
            keep_probs: self.mask_set.as_ref().map(|m| m.keep_probs.clone()),
            masks: self.mask_set.as_ref().map(|m| m.masks.clone()),
            output: self.output.clone(),
            rates: rates.to_vec(),
            seed,
            strategy: self.strategy,
            weights: weights.to_vec(),
        }
    }
}

/// Everything needed to re-check a merge from artifacts alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeAudit {
    pub base_part: Vec<f32>,
    pub contributions: Vec<Vec<f32>>,
    pub keep_probs: Option<Vec<f64>>,
    pub masks: Option<Vec<Vec<u8>>>,
    pub output: Vec<f32>,
    pub rates: Vec<f64>,
    pub seed: u64,
    pub strategy: Strategy,
    pub weights: Vec<f64>,
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn weighted_sum(base: &[f32], parts: &[Vec<f32>], weights: &[f64]) -> Vec<f32> {
    let mut acc: Vec<f64> = base.iter().map(|&v| v as f64).collect();
    for (y, &w) in parts.iter().zip(weights) {
        for (a, &v) in acc.iter_mut().zip(y) {
            *a += w * v as f64;
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

fn masked_rescale(mask: &[u8], x: &[f32], rate: f64) -> Vec<f32> {
    if rate >= 1.0 {
        return vec![0.0; x.len()];
    }
    let inv_keep = 1.0 - rate;
    mask.iter()
        .zip(x)
        .map(|(&m, &v)| {
            let y = (v as f64 / inv_keep) as f32;
            // Select rather than branch: mask bits are unpredictable.
            f32::from_bits(y.to_bits() & (m as u32).wrapping_neg())
        })
        .collect()
}

/// `ΔW_j h` for every adapter, checking that all adapters share dimensions.
pub fn adapter_outputs(adapters: &[&LowRankAdapter], h: &[f32]) -> Result<Vec<Vec<f32>>> {
    let first = adapters.first().ok_or(Error::EmptyPlan)?;
    for a in adapters {
        if a.d_in() != first.d_in() {
            return Err(Error::dims(
                format!("d_in of adapter '{}'", a.name()),
                first.d_in(),
                a.d_in(),
            ));
        }
        if a.d_out() != first.d_out() {
            return Err(Error::dims(
                format!("d_out of adapter '{}'", a.name()),
                first.d_out(),
                a.d_out(),
            ));
        }
    }
    adapters.iter().map(|a| apply_adapter(a, h)).collect()
}

/// Applies the strategy's transform to precomputed adapter outputs and
/// combines them with `base_part`. Rates and keys are ignored for `Direct`.
pub fn combine(
    strategy: Strategy,
    base_part: &[f32],
    raw: &[Vec<f32>],
    weights: &[f64],
    rates: &[f64],
    stream_keys: &[StreamKey],
) -> Result<MergeOutput> {
    let k = raw.len();
    if k == 0 {
        return Err(Error::EmptyPlan);
    }
    if weights.len() != k {
        return Err(Error::dims("merge weights", k, weights.len()));
    }
    let d_out = base_part.len();
    if let Some(bad) = raw.iter().find(|x| x.len() != d_out) {
        return Err(Error::dims("adapter output length", d_out, bad.len()));
    }
    if strategy != Strategy::Direct && rates.len() != k {
        return Err(Error::dims("dropout rates", k, rates.len()));
    }

    let (contributions, mask_set) = match strategy {
        Strategy::Direct => (raw.to_vec(), None),
        Strategy::McDropout => {
            check_rates(rates)?;
            if let Some((index, &rate)) = rates.iter().enumerate().find(|&(j, &p)| p >= 1.0 && weights[j] != 0.0) {
                return Err(Error::InvalidRate {
                    index,
                    rate,
                    reason: "dropout rate 1 makes the 1/(1-p) rescale undefined",
                });
            }
            let masks = sample_mc_masks(rates, d_out, stream_keys)?;
            (transform(&masks, raw, rates), Some(masks))
        }
        Strategy::OrthogonalMcDropout => {
            let masks = sample_orthogonal_masks(rates, d_out, stream_keys)?;
            (transform(&masks, raw, rates), Some(masks))
        }
    };
    let output = weighted_sum(base_part, &contributions, weights);
    Ok(MergeOutput {
        strategy,
        output,
        base_part: base_part.to_vec(),
        contributions,
        mask_set,
    })
}

fn transform(masks: &MaskSet, raw: &[Vec<f32>], rates: &[f64]) -> Vec<Vec<f32>> {
    masks
        .masks
        .iter()
        .zip(raw)
        .zip(rates)
        .map(|((m, x), &p)| masked_rescale(m, x, p))
        .collect()
}

fn prepare(base: &BaseLayer, adapters: &[LowRankAdapter], h: &[f32]) -> Result<(Vec<f32>, Vec<Vec<f32>>)> {
    let refs: Vec<&LowRankAdapter> = adapters.iter().collect();
    let raw = adapter_outputs(&refs, h)?;
    let base_part = base.apply(h, refs[0].d_out())?;
    Ok((base_part, raw))
}

/// `W h + Σ_j w_j ΔW_j h`.
pub fn merge_direct(base: &BaseLayer, adapters: &[LowRankAdapter], weights: &[f64], h: &[f32]) -> Result<MergeOutput> {
    let (base_part, raw) = prepare(base, adapters, h)?;
    combine(Strategy::Direct, &base_part, &raw, weights, &[], &[])
}

/// Independent dropout: `y_j = z^(j) ⊙ ΔW_j h / (1 - p_j)`.
pub fn merge_mc_dropout(
    base: &BaseLayer,
    adapters: &[LowRankAdapter],
    weights: &[f64],
    rates: &[f64],
    h: &[f32],
    stream_keys: &[StreamKey],
) -> Result<MergeOutput> {
    let (base_part, raw) = prepare(base, adapters, h)?;
    combine(Strategy::McDropout, &base_part, &raw, weights, rates, stream_keys)
}

/// Orthogonal dropout: `y_j = m^(j) ⊙ ΔW_j h / (1 - p_j)` with disjoint masks.
/// An adapter with `p_j = 1` contributes the zero vector.
pub fn merge_orthogonal(
    base: &BaseLayer,
    adapters: &[LowRankAdapter],
    weights: &[f64],
    rates: &[f64],
    h: &[f32],
    stream_keys: &[StreamKey],
) -> Result<MergeOutput> {
    let (base_part, raw) = prepare(base, adapters, h)?;
    combine(
        Strategy::OrthogonalMcDropout,
        &base_part,
        &raw,
        weights,
        rates,
        stream_keys,
    )
}

/// Runs `plan` for one layer invocation. Adapter `j` of the plan draws from
/// `StreamKey(plan.seed, layer_index, sample_index, j)`; reusing a
/// `sample_index` freezes the masks.
pub fn merge(
    plan: &MergePlan,
    adapters: &[LowRankAdapter],
    base: &BaseLayer,
    h: &[f32],
    layer_index: u64,
    sample_index: u64,
) -> Result<MergeOutput> {
    validate_plan(plan, adapters)?;
    let refs = plan.resolve(adapters)?;
    let raw = adapter_outputs(&refs, h)?;
    let base_part = base.apply(h, refs[0].d_out())?;
    let keys = StreamKey::per_adapter(plan.seed, layer_index, sample_index, plan.len());
    combine(plan.strategy, &base_part, &raw, &plan.weights(), &plan.rates(), &keys)
}
