//! Whole-array reference merges, written without the streaming engine.
//!
//! Each function walks a full tensor element by element and derives block
//! membership from the global index.

use mergepipe::checkpoint::DType;
use sha2::{Digest as _, Sha256};

#[derive(Debug, Clone, Copy)]
pub enum Op {
    Avg { lambda: f64 },
    Ties { lambda: f64, density: f64 },
    Dare { lambda: f64, p: f64, seed: u64 },
}

pub struct Tensor<'a> {
    pub name: &'a str,
    pub base: &'a [f32],
    /// Full expert weights (or stored deltas when the flag is set).
    pub experts: Vec<(&'a [f32], bool)>,
}

fn mix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn name_key(name: &str) -> u64 {
    let h = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(h[..8].try_into().unwrap())
}

fn dare_u(seed: u64, expert: usize, name: &str, j: usize) -> f64 {
    let k = mix(mix(mix(seed) ^ expert as u64) ^ name_key(name));
    (mix(k ^ j as u64) >> 11) as f64 / 9007199254740992.0
}

fn with_term(base: f32, term: f32) -> f32 {
    if term == 0.0 {
        base
    } else {
        base + term
    }
}

/// `selected(expert, block)` says whether the expert contributes to a block;
/// `k_total` is the plan's expert count.
pub fn merge(
    op: Op,
    t: &Tensor<'_>,
    block_size: usize,
    k_total: usize,
    selected: &dyn Fn(usize, usize) -> bool,
) -> Vec<f32> {
    let n = t.base.len();
    let delta = |i: usize, j: usize| -> Option<f32> {
        if !selected(i, j / block_size) {
            return None;
        }
        let (w, is_delta) = t.experts[i];
        Some(if is_delta { w[j] } else { w[j] - t.base[j] })
    };
    match op {
        Op::Avg { lambda } => {
            let c = (lambda / k_total as f64) as f32;
            (0..n)
                .map(|j| {
                    let s = (0..t.experts.len())
                        .filter_map(|i| delta(i, j))
                        .fold(0f32, |a, d| a + d);
                    with_term(t.base[j], c * s)
                })
                .collect()
        }
        Op::Dare { lambda, p, seed } => {
            let r = (1.0 / (1.0 - p)) as f32;
            (0..n)
                .map(|j| {
                    let mut s = 0f32;
                    for i in 0..t.experts.len() {
                        if let Some(d) = delta(i, j) {
                            if dare_u(seed, i, t.name, j) >= p {
                                s += d * r;
                            }
                        }
                    }
                    with_term(t.base[j], lambda as f32 * s)
                })
                .collect()
        }
        Op::Ties { lambda, density } => {
            // Trimmed deltas per expert over the whole tensor, trimming each block separately.
            let kept: Vec<Vec<f32>> = (0..t.experts.len())
                .map(|i| {
                    let mut out = vec![0f32; n];
                    let mut start = 0;
                    while start < n {
                        let end = (start + block_size).min(n);
                        let mut idx: Vec<usize> = (start..end).collect();
                        if delta(i, start).is_some() {
                            let d: Vec<f32> = (start..end).map(|j| delta(i, j).unwrap()).collect();
                            idx.sort_by(|&a, &b| {
                                let (x, y) = (d[a - start].abs(), d[b - start].abs());
                                y.partial_cmp(&x).unwrap().then(a.cmp(&b))
                            });
                            let keep = ((density * (end - start) as f64).ceil() as usize).min(end - start);
                            for &j in &idx[..keep] {
                                out[j] = d[j - start];
                            }
                        }
                        start = end;
                    }
                    out
                })
                .collect();
            (0..n)
                .map(|j| {
                    let total = kept.iter().fold(0f32, |a, k| a + k[j]);
                    let pos = total >= 0.0;
                    let agree: Vec<f32> = kept
                        .iter()
                        .map(|k| k[j])
                        .filter(|v| if pos { *v > 0.0 } else { *v < 0.0 })
                        .collect();
                    if agree.is_empty() {
                        return t.base[j];
                    }
                    let mean = agree.iter().fold(0f32, |a, v| a + v) / agree.len() as f32;
                    with_term(t.base[j], lambda as f32 * mean)
                })
                .collect()
        }
    }
}

/// Little-endian encoding, independent of the crate's codec.
pub fn encode(dtype: DType, values: &[f32]) -> Vec<u8> {
    let mut out = Vec::new();
    for v in values {
        match dtype {
            DType::F32 => out.extend_from_slice(&v.to_le_bytes()),
            DType::F16 => out.extend_from_slice(&half::f16::from_f32(*v).to_le_bytes()),
            DType::BF16 => out.extend_from_slice(&half::bf16::from_f32(*v).to_le_bytes()),
        }
    }
    out
}
