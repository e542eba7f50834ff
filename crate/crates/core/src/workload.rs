//! Deterministic synthetic base/expert checkpoints.
//!
//! The base is Gaussian. Each expert adds sparse, clustered deltas: the
//! flattened parameters are cut into fixed chunks, a random subset of chunks
//! is perturbed, and each perturbed chunk gets its own log-uniform amplitude.
//! This gives blocks a wide spread of divergence, which is what block
//! ranking needs to be meaningful.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::checkpoint::{write_checkpoint, DType, TensorData};
use crate::error::{Error, IoContext, Result};
use crate::operators::splitmix64;

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub seed: u64,
    pub base_elements: u64,
    pub k: usize,
    /// Scale of expert deltas relative to the base's standard deviation; 0 gives no deltas.
    pub divergence: f64,
    pub dtype: DType,
    /// Elements per delta cluster.
    pub chunk: u64,
    /// Probability that a chunk is perturbed.
    pub active: f64,
}

impl WorkloadSpec {
    pub fn new(seed: u64, base_elements: u64, k: usize, divergence: f64) -> Self {
        WorkloadSpec {
            seed,
            base_elements,
            k,
            divergence,
            dtype: DType::F32,
            chunk: 4096,
            active: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Workload {
    pub base: PathBuf,
    pub experts: Vec<PathBuf>,
}

impl Workload {
    /// Find `base.mpck` and the `expert_*.mpck` files written by [`generate`].
    pub fn load(dir: &Path) -> Result<Self> {
        let base = dir.join("base.mpck");
        if !base.is_file() {
            return Err(Error::io(&base, std::io::ErrorKind::NotFound.into()));
        }
        let mut experts = Vec::new();
        for entry in std::fs::read_dir(dir).at(dir)? {
            let p = entry.at(dir)?.path();
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if name.starts_with("expert_") && name.ends_with(".mpck") {
                experts.push(p);
            }
        }
        experts.sort();
        Ok(Workload { base, experts })
    }
}

pub const BASE_STD: f64 = 0.02;
const ROW: u64 = 2048;

/// Split `total` elements into up to eight tensors; 2-D when rows of 2048 fit exactly.
pub fn tensor_shapes(total: u64) -> Vec<(String, Vec<u64>)> {
    let count = (total / 1024).clamp(1, 8);
    let each = total / count;
    (0..count)
        .map(|i| {
            let n = if i + 1 == count {
                total - each * (count - 1)
            } else {
                each
            };
            let shape = if n % ROW == 0 && n > ROW {
                vec![n / ROW, ROW]
            } else {
                vec![n]
            };
            (format!("layers.{i}.weight"), shape)
        })
        .collect()
}

pub fn base_model_id(seed: u64) -> String {
    format!("base-{seed}")
}

pub fn expert_model_id(seed: u64, i: usize) -> String {
    format!("expert-{seed}-{i:02}")
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(stream)))
}

fn base_values(spec: &WorkloadSpec) -> Vec<f32> {
    let mut rng = rng_for(spec.seed, 0);
    let normal = Normal::new(0.0, BASE_STD).expect("positive std");
    (0..spec.base_elements)
        .map(|_| spec.dtype.quantize(normal.sample(&mut rng) as f32))
        .collect()
}

fn add_expert_deltas(spec: &WorkloadSpec, i: usize, values: &mut [f32]) {
    if spec.divergence == 0.0 {
        return;
    }
    let mut rng = rng_for(spec.seed, i as u64 + 1);
    // Per-expert spread: some experts diverge more than others.
    let scale = spec.divergence * BASE_STD * rng.random_range(0.5..1.5);
    for chunk in values.chunks_mut(spec.chunk.max(1) as usize) {
        if !rng.random_bool(spec.active) {
            continue;
        }
        let amp = scale * 10f64.powf(rng.random_range(-2.0..0.0));
        for v in chunk {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = spec.dtype.quantize(*v + (amp * z) as f32);
        }
    }
}

fn tensors(spec: &WorkloadSpec, flat: &[f32]) -> Vec<TensorData> {
    let mut off = 0usize;
    tensor_shapes(spec.base_elements)
        .into_iter()
        .map(|(name, shape)| {
            let n = shape.iter().product::<u64>() as usize;
            let t = TensorData {
                name,
                dtype: spec.dtype,
                shape,
                values: flat[off..off + n].to_vec(),
            };
            off += n;
            t
        })
        .collect()
}

/// Write `base.mpck` and `expert_XX.mpck` into `dir`.
pub fn generate(dir: &Path, spec: &WorkloadSpec) -> Result<Workload> {
    if spec.base_elements == 0 {
        return Err(Error::ShapeDataMismatch {
            name: "base".into(),
            shape: vec![0],
            expected: 1,
            actual: 0,
        });
    }
    std::fs::create_dir_all(dir).at(dir)?;
    let base = base_values(spec);
    let base_path = dir.join("base.mpck");
    write_checkpoint(&base_path, &base_model_id(spec.seed), &tensors(spec, &base))?;
    let mut experts = Vec::with_capacity(spec.k);
    for i in 0..spec.k {
        let mut vals = base.clone();
        add_expert_deltas(spec, i, &mut vals);
        let p = dir.join(format!("expert_{i:02}.mpck"));
        write_checkpoint(&p, &expert_model_id(spec.seed, i), &tensors(spec, &vals))?;
        experts.push(p);
    }
    Ok(Workload {
        base: base_path,
        experts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::{file_digest, Checkpoint};

    #[test]
    fn shapes_cover_total() {
        for total in [1u64, 1000, 4096, 10_000, 16 << 20, (16 << 20) + 3] {
            let s = tensor_shapes(total);
            let sum: u64 = s.iter().map(|(_, sh)| sh.iter().product::<u64>()).sum();
            assert_eq!(sum, total);
        }
        let big = tensor_shapes(16 << 20);
        assert_eq!(big.len(), 8);
        assert_eq!(big[0].1, vec![1024, 2048]);
    }

    #[test]
    fn zero_divergence_copies_base_payload() {
        let dir = tempfile::tempdir().unwrap();
        let w = generate(dir.path(), &WorkloadSpec::new(7, 5000, 2, 0.0)).unwrap();
        let base = Checkpoint::open(&w.base).unwrap();
        for e in &w.experts {
            let e = Checkpoint::open(e).unwrap();
            for ti in 0..base.header().tensors.len() {
                assert_eq!(e.read_tensor(ti).unwrap(), base.read_tensor(ti).unwrap());
            }
        }
    }

    #[test]
    fn same_seed_same_files() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = WorkloadSpec::new(42, 20_000, 3, 1.0);
        let wa = generate(a.path(), &spec).unwrap();
        let wb = generate(b.path(), &spec).unwrap();
        for (x, y) in std::iter::once(&wa.base)
            .chain(&wa.experts)
            .zip(std::iter::once(&wb.base).chain(&wb.experts))
        {
            assert_eq!(file_digest(x).unwrap(), file_digest(y).unwrap());
        }
        let c = tempfile::tempdir().unwrap();
        let wc = generate(c.path(), &WorkloadSpec::new(43, 20_000, 3, 1.0)).unwrap();
        assert_ne!(
            file_digest(&wa.experts[0]).unwrap(),
            file_digest(&wc.experts[0]).unwrap()
        );
        assert_eq!(Workload::load(a.path()).unwrap(), wa);
    }

    #[test]
    fn deltas_are_sparse_and_clustered() {
        let dir = tempfile::tempdir().unwrap();
        let spec = WorkloadSpec::new(3, 64 * 4096, 1, 1.0);
        let w = generate(dir.path(), &spec).unwrap();
        let base = Checkpoint::open(&w.base).unwrap();
        let e = Checkpoint::open(&w.experts[0]).unwrap();
        let mut changed_chunks = 0;
        let mut total_chunks = 0;
        for ti in 0..base.header().tensors.len() {
            let b = base.read_tensor(ti).unwrap();
            let x = e.read_tensor(ti).unwrap();
            for (cb, cx) in b.chunks(4096).zip(x.chunks(4096)) {
                total_chunks += 1;
                if cb != cx {
                    changed_chunks += 1;
                }
            }
        }
        assert!(
            changed_chunks > 0 && changed_chunks < total_chunks / 2,
            "{changed_chunks}/{total_chunks}"
        );
    }
}
