//! Adapter and merge-plan domain types plus the low-rank forward pass.
//!
//! Tensors are stored as `f32`; every dot product accumulates in `f64` and is
//! narrowed once at the end.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;

/// Absolute slack on `Σ(1 - p_j) <= 1`, absorbing decimal-literal rounding
/// (ten rates of `0.9` sum to `0.9999999999999998`, eleven to `1.1`).
pub const KEEP_SUM_TOLERANCE: f64 = 1e-9;

/// Dense row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims("matrix data", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::dims("matrix row", cols, row.len()));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn random(rows: usize, cols: usize, stream: &mut Stream) -> Self {
        let data = (0..rows * cols).map(|_| stream.uniform_f32(-1.0, 1.0)).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f32>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self · x`, accumulated in f64.
    pub fn matvec_f64(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::dims("matrix-vector product", self.cols, x.len()));
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(&a, &b)| a as f64 * b).sum())
            .collect())
    }

    pub fn matvec(&self, x: &[f32]) -> Result<Vec<f32>> {
        let x: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        Ok(self.matvec_f64(&x)?.into_iter().map(|v| v as f32).collect())
    }
}

/// One adapter: `ΔW = scale · B·A` with `A: rank × d_in`, `B: d_out × rank`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter {
    name: String,
    factor_a: Matrix,
    factor_b: Matrix,
    scale: f32,
}

impl LowRankAdapter {
    pub fn new(name: impl Into<String>, factor_a: Matrix, factor_b: Matrix, scale: f32) -> Result<Self> {
        let name = name.into();
        let invalid = |reason: String| Error::InvalidAdapter {
            name: name.clone(),
            reason,
        };
        let rank = factor_a.rows();
        let (d_in, d_out) = (factor_a.cols(), factor_b.rows());
        if factor_b.cols() != rank {
            return Err(invalid(format!(
                "factor_b has {} columns but factor_a has rank {rank}",
                factor_b.cols()
            )));
        }
        if rank == 0 || d_in == 0 || d_out == 0 {
            return Err(invalid(format!(
                "rank, d_in and d_out must be positive (got {rank}, {d_in}, {d_out})"
            )));
        }
        if rank > d_in.min(d_out) {
            return Err(invalid(format!(
                "rank {rank} exceeds min(d_in, d_out) = {}",
                d_in.min(d_out)
            )));
        }
        if !factor_a.is_finite() || !factor_b.is_finite() || !scale.is_finite() {
            return Err(Error::NonFinite(format!("adapter '{name}'")));
        }
        Ok(Self {
            name,
            factor_a,
            factor_b,
            scale,
        })
    }

    /// Random factors uniform in `[-1, 1)`.
    pub fn random(
        name: impl Into<String>,
        d_in: usize,
        d_out: usize,
        rank: usize,
        stream: &mut Stream,
    ) -> Result<Self> {
        let a = Matrix::random(rank, d_in, stream);
        let b = Matrix::random(d_out, rank, stream);
        Self::new(name, a, b, 1.0)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn d_in(&self) -> usize {
        self.factor_a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.factor_b.rows()
    }

    pub fn rank(&self) -> usize {
        self.factor_a.rows()
    }

    pub fn factor_a(&self) -> &Matrix {
        &self.factor_a
    }

    pub fn factor_b(&self) -> &Matrix {
        &self.factor_b
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }
}

/// `scale · B(A h)` without forming the dense update.
pub fn apply_adapter(adapter: &LowRankAdapter, h: &[f32]) -> Result<Vec<f32>> {
    if h.len() != adapter.d_in() {
        return Err(Error::dims(
            format!("input to adapter '{}'", adapter.name()),
            adapter.d_in(),
            h.len(),
        ));
    }
    let h: Vec<f64> = h.iter().map(|&v| v as f64).collect();
    let hidden = adapter.factor_a.matvec_f64(&h)?;
    let out = adapter.factor_b.matvec_f64(&hidden)?;
    let scale = adapter.scale as f64;
    Ok(out.into_iter().map(|v| (scale * v) as f32).collect())
}

/// Dense update `scale · B·A` kept in f64, so that dense and factored
/// products agree to f64 rounding rather than f32 storage rounding.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseDelta {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseDelta {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// `self += weight · other`.
    pub fn add_scaled(&mut self, other: &DenseDelta, weight: f64) -> Result<()> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::dims(
                "dense delta sum",
                self.rows * self.cols,
                other.rows * other.cols,
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += weight * b;
        }
        Ok(())
    }

    pub fn matvec(&self, h: &[f32]) -> Result<Vec<f32>> {
        if h.len() != self.cols {
            return Err(Error::dims("dense delta product", self.cols, h.len()));
        }
        Ok(self
            .data
            .chunks_exact(self.cols.max(1))
            .take(self.rows)
            .map(|row| row.iter().zip(h).map(|(&w, &x)| w * x as f64).sum::<f64>() as f32)
            .collect())
    }

    /// Narrowed to storage precision.
    pub fn to_matrix(&self) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

/// Dense `scale · B·A`. Intended for debugging and as a test oracle.
pub fn materialize_delta(adapter: &LowRankAdapter) -> DenseDelta {
    let (a, b) = (&adapter.factor_a, &adapter.factor_b);
    let (rank, d_in, d_out) = (a.rows, a.cols, b.rows);
    let scale = adapter.scale as f64;
    let mut data = Vec::with_capacity(d_out * d_in);
    for i in 0..d_out {
        let brow = b.row(i);
        for j in 0..d_in {
            let acc: f64 = (0..rank).map(|l| brow[l] as f64 * a.data[l * d_in + j] as f64).sum();
            data.push(scale * acc);
        }
    }
    DenseDelta {
        rows: d_out,
        cols: d_in,
        data,
    }
}

/// Frozen base weight `W: d_out × d_in`; `None` contributes a zero vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BaseLayer {
    pub weight: Option<Matrix>,
}

impl BaseLayer {
    pub fn new(weight: Matrix) -> Result<Self> {
        if !weight.is_finite() {
            return Err(Error::NonFinite("base weight".into()));
        }
        Ok(Self { weight: Some(weight) })
    }

    pub fn absent() -> Self {
        Self { weight: None }
    }

    /// `W h`, or zeros of length `d_out` when absent.
    pub fn apply(&self, h: &[f32], d_out: usize) -> Result<Vec<f32>> {
        match &self.weight {
            None => Ok(vec![0.0; d_out]),
            Some(w) => {
                if w.rows() != d_out {
                    return Err(Error::dims("base weight rows", d_out, w.rows()));
                }
                w.matvec(h)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "direct")]
    Direct,
    #[serde(rename = "dropout", alias = "mc_dropout")]
    McDropout,
    #[serde(rename = "orthogonal", alias = "orthogonal_mc_dropout")]
    OrthogonalMcDropout,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Direct => "direct",
            Strategy::McDropout => "dropout",
            Strategy::OrthogonalMcDropout => "orthogonal",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "direct" => Ok(Strategy::Direct),
            "dropout" | "mc" | "mc_dropout" => Ok(Strategy::McDropout),
            "orthogonal" | "orthogonal_mc_dropout" => Ok(Strategy::OrthogonalMcDropout),
            other => Err(format!(
                "unknown strategy '{other}' (expected direct|dropout|orthogonal)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    /// Index into the adapter list the plan is evaluated against.
    pub adapter: usize,
    pub weight: f64,
    pub dropout_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergePlan {
    pub entries: Vec<PlanEntry>,
    pub strategy: Strategy,
    pub seed: u64,
}

impl MergePlan {
    /// One entry per adapter, in adapter order.
    pub fn sequential(weights: &[f64], rates: &[f64], strategy: Strategy, seed: u64) -> Result<Self> {
        if weights.len() != rates.len() {
            return Err(Error::dims("plan weights vs rates", rates.len(), weights.len()));
        }
        let entries = weights
            .iter()
            .zip(rates)
            .enumerate()
            .map(|(adapter, (&weight, &dropout_rate))| PlanEntry {
                adapter,
                weight,
                dropout_rate,
            })
            .collect();
        Ok(Self {
            entries,
            strategy,
            seed,
        })
    }

    pub fn weights(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.weight).collect()
    }

    pub fn rates(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.dropout_rate).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adapters in plan order.
    pub fn resolve<'a>(&self, adapters: &'a [LowRankAdapter]) -> Result<Vec<&'a LowRankAdapter>> {
        self.entries
            .iter()
            .map(|e| {
                adapters
                    .get(e.adapter)
                    .ok_or_else(|| Error::dims("plan adapter reference", adapters.len(), e.adapter))
            })
            .collect()
    }
}

/// `Σ_j (1 - p_j)`.
pub fn keep_sum(rates: &[f64]) -> f64 {
    rates.iter().map(|p| 1.0 - p).sum()
}

pub fn check_rates(rates: &[f64]) -> Result<()> {
    for (index, &rate) in rates.iter().enumerate() {
        if !rate.is_finite() || !(0.0..=1.0).contains(&rate) {
            return Err(Error::InvalidRate {
                index,
                rate,
                reason: "dropout rate must lie in [0, 1]",
            });
        }
    }
    Ok(())
}

/// Rejects rate vectors whose keep rates exceed one unit of capacity.
pub fn check_orthogonal_capacity(rates: &[f64]) -> Result<()> {
    check_rates(rates)?;
    let sum = keep_sum(rates);
    if sum > 1.0 + KEEP_SUM_TOLERANCE {
        return Err(Error::ConstraintViolation { keep_sum: sum });
    }
    Ok(())
}

/// Checks every plan invariant for its strategy. Only the orthogonal strategy
/// enforces the keep-rate capacity.
pub fn validate_plan(plan: &MergePlan, adapters: &[LowRankAdapter]) -> Result<()> {
    if plan.is_empty() {
        return Err(Error::EmptyPlan);
    }
    let resolved = plan.resolve(adapters)?;
    let (d_in, d_out) = (resolved[0].d_in(), resolved[0].d_out());
    for a in &resolved[1..] {
        if a.d_in() != d_in {
            return Err(Error::dims(format!("d_in of adapter '{}'", a.name()), d_in, a.d_in()));
        }
        if a.d_out() != d_out {
            return Err(Error::dims(
                format!("d_out of adapter '{}'", a.name()),
                d_out,
                a.d_out(),
            ));
        }
    }
    if let Some(e) = plan.entries.iter().find(|e| !e.weight.is_finite()) {
        return Err(Error::NonFinite(format!("weight of plan entry {}", e.adapter)));
    }
    let rates = plan.rates();
    match plan.strategy {
        Strategy::OrthogonalMcDropout => check_orthogonal_capacity(&rates),
        Strategy::Direct | Strategy::McDropout => check_rates(&rates),
    }
}
