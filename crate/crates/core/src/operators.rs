//! Elementwise merge kernels.
//!
//! Each kernel maps one output block from the base block plus the deltas of
//! the experts whose plan selected that block. Experts absent from a batch
//! contribute zero. Kernels are pure functions of their inputs and the block
//! identity, so blocks can be processed in any order or in parallel.
//!
//! All arithmetic is `f32`, accumulated in ascending expert order. A zero
//! contribution leaves the base value untouched bit for bit (so `-0.0`
//! survives a merge that changes nothing).

use serde::{Deserialize, Serialize};

use crate::canonical::{self, Digest};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum OperatorKind {
    Avg,
    Ties,
    Dare,
}

impl OperatorKind {
    pub fn name(self) -> &'static str {
        match self {
            OperatorKind::Avg => "avg",
            OperatorKind::Ties => "ties",
            OperatorKind::Dare => "dare",
        }
    }
}

impl std::str::FromStr for OperatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "avg" | "average" => Ok(OperatorKind::Avg),
            "ties" => Ok(OperatorKind::Ties),
            "dare" => Ok(OperatorKind::Dare),
            _ => Err(Error::InvalidOperator(format!("unknown operator `{s}`"))),
        }
    }
}

impl std::fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Operator and its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatorSpec {
    pub kind: OperatorKind,
    /// Scaling coefficient applied to the combined delta.
    #[serde(serialize_with = "canonical::finite")]
    pub lambda: f64,
    /// TIES: fraction of entries kept per expert and block.
    #[serde(serialize_with = "canonical::finite")]
    pub density: f64,
    /// DARE: probability of dropping an entry.
    #[serde(serialize_with = "canonical::finite")]
    pub drop_p: f64,
    pub seed: u64,
}

pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_DENSITY: f64 = 0.2;
pub const DEFAULT_DROP_P: f64 = 0.9;

impl OperatorSpec {
    pub fn new(kind: OperatorKind) -> Self {
        OperatorSpec {
            kind,
            lambda: DEFAULT_LAMBDA,
            density: DEFAULT_DENSITY,
            drop_p: DEFAULT_DROP_P,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() {
            return Err(Error::InvalidOperator("lambda must be finite".into()));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::InvalidOperator(format!(
                "density {} not in (0, 1]",
                self.density
            )));
        }
        if !(self.drop_p >= 0.0 && self.drop_p < 1.0) {
            return Err(Error::InvalidOperator(format!("drop_p {} not in [0, 1)", self.drop_p)));
        }
        Ok(())
    }

    /// Reset parameters the operator ignores, so equivalent specs digest equally.
    pub fn normalized(mut self) -> Self {
        if self.kind != OperatorKind::Ties {
            self.density = DEFAULT_DENSITY;
        }
        if self.kind != OperatorKind::Dare {
            self.drop_p = DEFAULT_DROP_P;
            self.seed = 0;
        }
        self
    }
}

/// Base block plus the deltas of the experts selected for it.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaBatch {
    pub tensor_id: String,
    pub block_idx: u64,
    /// Flattened index of the block's first element within its tensor.
    pub first_element: u64,
    pub base_values: Vec<f32>,
    /// `(expert index in the plan, delta)`, ascending by expert index.
    pub deltas: Vec<(u32, Vec<f32>)>,
}

impl DeltaBatch {
    fn check(&self) -> Result<()> {
        let n = self.base_values.len();
        for (_, d) in &self.deltas {
            if d.len() != n {
                return Err(Error::LengthMismatch {
                    expected: n,
                    actual: d.len(),
                });
            }
        }
        Ok(())
    }
}

#[inline]
fn add(base: f32, term: f32) -> f32 {
    if term == 0.0 {
        base
    } else {
        base + term
    }
}

/// `out = base + (lambda / k_total) * sum(deltas)`.
pub fn apply_avg(batch: &DeltaBatch, lambda: f64, k_total: usize) -> Result<Vec<f32>> {
    batch.check()?;
    if k_total == 0 {
        return Err(Error::InvalidOperator("AVG needs at least one expert".into()));
    }
    let scale = (lambda / k_total as f64) as f32;
    let mut sum = vec![0f32; batch.base_values.len()];
    for (_, d) in &batch.deltas {
        for (s, v) in sum.iter_mut().zip(d) {
            *s += v;
        }
    }
    Ok(batch
        .base_values
        .iter()
        .zip(&sum)
        .map(|(&b, &s)| add(b, scale * s))
        .collect())
}

/// Number of entries TIES keeps in a block of `n` elements.
pub fn ties_keep_count(density: f64, n: usize) -> usize {
    ((density * n as f64).ceil() as usize).min(n)
}

/// Zero all but the `k` largest-magnitude entries; equal magnitudes keep the lower index.
pub fn ties_trim(delta: &[f32], k: usize) -> Vec<f32> {
    let n = delta.len();
    if k >= n {
        return delta.to_vec();
    }
    if k == 0 {
        return vec![0.0; n];
    }
    // Ascending key = descending magnitude, then ascending index.
    let key = |j: usize| ((!(delta[j].to_bits() & 0x7fff_ffff)) as u64) << 32 | j as u64;
    let mut keys: Vec<u64> = (0..n).map(key).collect();
    let (_, &mut threshold, _) = keys.select_nth_unstable(k - 1);
    (0..n)
        .map(|j| if key(j) <= threshold { delta[j] } else { 0.0 })
        .collect()
}

/// Trim, elect sign, disjoint mean.
pub fn apply_ties(batch: &DeltaBatch, lambda: f64, density: f64) -> Result<Vec<f32>> {
    batch.check()?;
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::InvalidOperator(format!("density {density} not in (0, 1]")));
    }
    let n = batch.base_values.len();
    let k = ties_keep_count(density, n);
    let kept: Vec<Vec<f32>> = batch.deltas.iter().map(|(_, d)| ties_trim(d, k)).collect();
    let lam = lambda as f32;
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let mut total = 0f32;
        for d in &kept {
            total += d[j];
        }
        let positive = total >= 0.0;
        let mut sum = 0f32;
        let mut count = 0u32;
        for d in &kept {
            let v = d[j];
            if (positive && v > 0.0) || (!positive && v < 0.0) {
                sum += v;
                count += 1;
            }
        }
        let term = if count == 0 { 0.0 } else { lam * (sum / count as f32) };
        out.push(add(batch.base_values[j], term));
    }
    Ok(out)
}

#[inline]
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Keyed hash of the DARE draw coordinates; the first three inputs are folded
/// once per expert and tensor by [`dare_stream_key`].
#[inline]
pub fn hash64(seed: u64, expert_idx: u64, tensor_key: u64, element: u64) -> u64 {
    splitmix64(dare_stream_key(seed, expert_idx, tensor_key) ^ element)
}

#[inline]
pub fn dare_stream_key(seed: u64, expert_idx: u64, tensor_key: u64) -> u64 {
    let h = splitmix64(seed);
    let h = splitmix64(h ^ expert_idx);
    splitmix64(h ^ tensor_key)
}

/// Top 53 bits mapped to `[0, 1)`.
#[inline]
pub fn uniform01(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Compact per-tensor key folded into DARE draws.
pub fn tensor_key(tensor_id: &str) -> u64 {
    Digest::of_bytes(tensor_id.as_bytes()).prefix_u64()
}

/// Drop each delta entry with probability `drop_p`, rescale survivors by
/// `1 / (1 - drop_p)`, then task-arithmetic sum.
pub fn apply_dare(batch: &DeltaBatch, lambda: f64, drop_p: f64, seed: u64) -> Result<Vec<f32>> {
    batch.check()?;
    if !(0.0..1.0).contains(&drop_p) {
        return Err(Error::InvalidOperator(format!("drop_p {drop_p} not in [0, 1)")));
    }
    let n = batch.base_values.len();
    let scale = (1.0 / (1.0 - drop_p)) as f32;
    let tkey = tensor_key(&batch.tensor_id);
    let mut sum = vec![0f32; n];
    for (expert, d) in &batch.deltas {
        let stream = dare_stream_key(seed, *expert as u64, tkey);
        for (j, (s, &v)) in sum.iter_mut().zip(d).enumerate() {
            let u = uniform01(splitmix64(stream ^ (batch.first_element + j as u64)));
            if u >= drop_p {
                *s += v * scale;
            }
        }
    }
    let lam = lambda as f32;
    Ok(batch
        .base_values
        .iter()
        .zip(&sum)
        .map(|(&b, &s)| add(b, lam * s))
        .collect())
}

/// Dispatch on the operator kind. `k_total` is the number of experts in the plan.
pub fn apply(spec: &OperatorSpec, batch: &DeltaBatch, k_total: usize) -> Result<Vec<f32>> {
    if batch.deltas.is_empty() {
        batch.check()?;
        return Ok(batch.base_values.clone());
    }
    match spec.kind {
        OperatorKind::Avg => apply_avg(batch, spec.lambda, k_total),
        OperatorKind::Ties => apply_ties(batch, spec.lambda, spec.density),
        OperatorKind::Dare => apply_dare(batch, spec.lambda, spec.drop_p, spec.seed),
    }
}
