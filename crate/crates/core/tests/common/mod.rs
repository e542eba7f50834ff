#![allow(dead_code)]

pub mod oracle;

use std::path::{Path, PathBuf};

use mergepipe::analyzer::{analyze_delta, analyze_model};
use mergepipe::checkpoint::{block_count, write_checkpoint, DType, TensorData};
use mergepipe::{Checkpoint, ExpertInput, IoLedger, MergePlan, OperatorKind, OperatorSpec, Store};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tensor(name: &str, dtype: DType, shape: &[u64], values: Vec<f32>) -> TensorData {
    TensorData {
        name: name.into(),
        dtype,
        shape: shape.to_vec(),
        values: values.into_iter().map(|v| dtype.quantize(v)).collect(),
    }
}

pub fn write_model(dir: &Path, id: &str, tensors: &[TensorData]) -> PathBuf {
    let p = dir.join(format!("{id}.mpck"));
    write_checkpoint(&p, id, tensors).unwrap();
    p
}

pub struct Models {
    pub base: Checkpoint,
    pub experts: Vec<ExpertInput>,
}

pub fn open(base: &Path, experts: &[PathBuf]) -> Models {
    Models {
        base: Checkpoint::open(base).unwrap(),
        experts: experts.iter().map(|p| ExpertInput::open(p, false).unwrap()).collect(),
    }
}

pub fn analyze(store: &mut Store, m: &Models, block_size: u64) {
    let l = IoLedger::new();
    analyze_model(&m.base, block_size, store.catalog_mut(), &l).unwrap();
    for e in &m.experts {
        analyze_delta(e, &m.base, block_size, store.catalog_mut(), &l).unwrap();
    }
    store.catalog_mut().flush().unwrap();
}

/// All tensors of a checkpoint, concatenated.
pub fn payload(path: &Path) -> Vec<u8> {
    let ck = Checkpoint::open(path).unwrap();
    let bytes = std::fs::read(path).unwrap();
    let start = ck.header_bytes() as usize;
    bytes[start..].to_vec()
}

pub struct Case {
    pub dir: tempfile::TempDir,
    pub models: Models,
    pub store: Store,
    pub block_size: u64,
}

/// Random tensors and dtypes; each expert perturbs a random share of entries,
/// from none to all.
pub fn random_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir = tempfile::tempdir().unwrap();
    let dtypes = [DType::F32, DType::F16, DType::BF16];
    let shapes: Vec<(String, DType, u64)> = (0..rng.random_range(1..4))
        .map(|i| {
            (
                format!("t{i}"),
                dtypes[rng.random_range(0..3)],
                rng.random_range(1..3000),
            )
        })
        .collect();
    let base_vals: Vec<Vec<f32>> = shapes
        .iter()
        .map(|(_, _, n)| (0..*n).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect();
    let mk = |vals: &[Vec<f32>]| -> Vec<_> {
        shapes
            .iter()
            .zip(vals)
            .map(|((name, dt, n), v)| tensor(name, *dt, &[*n], v.clone()))
            .collect()
    };
    let bp = write_model(dir.path(), "base", &mk(&base_vals));
    let k = rng.random_range(1..5);
    let eps: Vec<_> = (0..k)
        .map(|e| {
            let density: f64 = [0.0, 0.05, 0.5, 1.0][rng.random_range(0..4)];
            let vals: Vec<Vec<f32>> = base_vals
                .iter()
                .map(|t| {
                    t.iter()
                        .map(|x| {
                            if rng.random_bool(density) {
                                x + rng.random_range(-0.5f32..0.5)
                            } else {
                                *x
                            }
                        })
                        .collect()
                })
                .collect();
            write_model(dir.path(), &format!("e{e}"), &mk(&vals))
        })
        .collect();
    let models = open(&bp, &eps);
    let store = Store::open(dir.path().join("store")).unwrap();
    Case {
        dir,
        models,
        store,
        block_size: rng.random_range(1..700),
    }
}

pub fn random_op(rng: &mut impl Rng) -> OperatorSpec {
    let kind = [OperatorKind::Avg, OperatorKind::Ties, OperatorKind::Dare][rng.random_range(0..3)];
    random_op_of(kind, rng)
}

pub fn random_op_of(kind: OperatorKind, rng: &mut impl Rng) -> OperatorSpec {
    let mut op = OperatorSpec::new(kind);
    op.lambda = rng.random_range(0.1..1.5);
    op.density = rng.random_range(0.05..=1.0);
    op.drop_p = rng.random_range(0.0..0.95);
    op.seed = rng.random();
    op.normalized()
}

pub fn oracle_op(op: &OperatorSpec) -> oracle::Op {
    match op.kind {
        OperatorKind::Avg => oracle::Op::Avg { lambda: op.lambda },
        OperatorKind::Ties => oracle::Op::Ties {
            lambda: op.lambda,
            density: op.density,
        },
        OperatorKind::Dare => oracle::Op::Dare {
            lambda: op.lambda,
            p: op.drop_p,
            seed: op.seed,
        },
    }
}

/// Compare a published merge output with the whole-array reference restricted
/// to the plan's selection, tensor by tensor, as encoded bytes.
pub fn check_against_reference(models: &Models, plan: &MergePlan, merged: &Path) -> Result<(), String> {
    let merged = Checkpoint::open(merged).unwrap();
    let s = plan.block_size;
    for (ti, t) in models.base.header().tensors.iter().enumerate() {
        let base = models.base.read_tensor(ti).unwrap();
        let experts: Vec<Vec<f32>> = models
            .experts
            .iter()
            .map(|e| e.checkpoint.read_tensor(ti).unwrap())
            .collect();
        let per_block = plan.experts_per_block(&t.name, block_count(t, s).unwrap());
        let want = oracle::merge(
            oracle_op(&plan.op),
            &oracle::Tensor {
                name: &t.name,
                base: &base,
                experts: experts
                    .iter()
                    .zip(&models.experts)
                    .map(|(v, e)| (v.as_slice(), e.is_delta))
                    .collect(),
            },
            s as usize,
            experts.len(),
            &|i, b| per_block[b].contains(&(i as u32)),
        );
        let got = merged.read_block_raw(ti, 0, t.elements()).unwrap();
        if got != oracle::encode(t.dtype, &want) {
            return Err(format!("tensor {} differs under {:?}", t.name, plan.op.kind));
        }
    }
    Ok(())
}
