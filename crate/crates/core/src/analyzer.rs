//! Block metadata and delta sketches, so planning never touches tensor data.

use crate::canonical::Digest;
use crate::catalog::{BlockMetaRecord, Catalog, KeyPart, Sketch};
use crate::checkpoint::{block_count, BlockRef, Checkpoint};
use crate::error::Result;
use crate::metrics::{Category, IoLedger};
use crate::planner::{check_structure, ExpertInput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AnalyzeOutcome {
    pub blocks: u64,
    /// Records written; unchanged blocks are skipped.
    pub written: u64,
}

fn existing(catalog: &Catalog, r: &BlockRef) -> Result<Option<BlockMetaRecord>> {
    catalog.get_one(&[
        KeyPart::from(r.model_id.as_str()),
        KeyPart::from(r.tensor_id.as_str()),
        KeyPart::Int(r.block_idx),
    ])
}

fn put(catalog: &mut Catalog, rec: &BlockMetaRecord, ledger: &IoLedger) -> Result<bool> {
    let out = catalog.put(rec)?;
    if out.written {
        ledger.charge(Category::Meta, out.bytes);
    }
    Ok(out.written)
}

/// Hash and sketch every block. Records whose hash and layout already
/// match are left alone, along with any delta sketch they carry.
pub fn analyze_model(
    ckpt: &Checkpoint,
    block_size: u64,
    catalog: &mut Catalog,
    ledger: &IoLedger,
) -> Result<AnalyzeOutcome> {
    let mut out = AnalyzeOutcome::default();
    for (ti, t) in ckpt.header().tensors.iter().enumerate() {
        for b in 0..block_count(t, block_size)? {
            let raw = ckpt.read_block_raw(ti, b, block_size)?;
            ledger.charge(Category::Meta, raw.len() as u64);
            out.blocks += 1;
            let key = BlockRef {
                model_id: ckpt.model_id().to_string(),
                tensor_id: t.name.clone(),
                block_idx: b,
            };
            let hash = Digest::of_bytes(&raw);
            if existing(catalog, &key)?.is_some_and(|e| e.hash == hash && e.layout == block_size) {
                continue;
            }
            let values = t.dtype.decode(&raw);
            let rec = BlockMetaRecord {
                key,
                bytes: raw.len() as u64,
                shape: values.len() as u64,
                dtype: t.dtype,
                hash,
                sketch: Sketch::of_values(&values),
                layout: block_size,
            };
            out.written += put(catalog, &rec, ledger)? as u64;
        }
    }
    Ok(out)
}

/// Store `||expert_b - base_b||_2` in each expert block's sketch. A delta
/// expert is measured against an implicit zero base (the base is not read).
pub fn analyze_delta(
    expert: &ExpertInput,
    base: &Checkpoint,
    block_size: u64,
    catalog: &mut Catalog,
    ledger: &IoLedger,
) -> Result<AnalyzeOutcome> {
    check_structure(base.header(), std::slice::from_ref(expert))?;
    let ckpt = &expert.checkpoint;
    let base_id = base.model_id().to_string();
    let mut out = AnalyzeOutcome::default();
    for (ti, t) in ckpt.header().tensors.iter().enumerate() {
        let bti = base.tensor_index(&t.name)?;
        for b in 0..block_count(t, block_size)? {
            let raw = ckpt.read_block_raw(ti, b, block_size)?;
            ledger.charge(Category::Meta, raw.len() as u64);
            out.blocks += 1;
            let values = t.dtype.decode(&raw);
            let sq: f64 = if expert.is_delta {
                values.iter().map(|v| (*v as f64) * (*v as f64)).sum()
            } else {
                let bb = base.read_block_at(bti, b, block_size)?;
                ledger.charge(Category::Meta, bb.raw_bytes);
                values
                    .iter()
                    .zip(&bb.values)
                    .map(|(e, x)| {
                        let d = *e as f64 - *x as f64;
                        d * d
                    })
                    .sum()
            };
            let mut sketch = Sketch::of_values(&values);
            sketch.delta_l2 = Some(sq.sqrt());
            sketch.delta_base_id = Some(base_id.clone());
            let rec = BlockMetaRecord {
                key: BlockRef {
                    model_id: ckpt.model_id().to_string(),
                    tensor_id: t.name.clone(),
                    block_idx: b,
                },
                bytes: raw.len() as u64,
                shape: values.len() as u64,
                dtype: t.dtype,
                hash: Digest::of_bytes(&raw),
                sketch,
                layout: block_size,
            };
            out.written += put(catalog, &rec, ledger)? as u64;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::RecordKind;
    use crate::checkpoint::{write_checkpoint, DType, TensorData};

    fn t(name: &str, values: Vec<f32>) -> TensorData {
        TensorData {
            name: name.into(),
            dtype: DType::F32,
            shape: vec![values.len() as u64],
            values,
        }
    }

    #[test]
    fn record_counts_and_idempotence() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.mpck");
        write_checkpoint(
            &p,
            "m",
            &[t("a", (0..10).map(|i| i as f32).collect()), t("b", vec![1.0; 8])],
        )
        .unwrap();
        let ck = Checkpoint::open(&p).unwrap();
        let mut cat = Catalog::open(dir.path().join("cat")).unwrap();
        let l = IoLedger::new();
        let r = analyze_model(&ck, 4, &mut cat, &l).unwrap();
        assert_eq!(r, AnalyzeOutcome { blocks: 5, written: 5 });
        assert_eq!(l.expert_read(), 0);
        assert!(l.meta_io() >= 72);
        let bytes = cat.disk_bytes().unwrap();
        let again = analyze_model(&ck, 4, &mut cat, &l).unwrap();
        assert_eq!(again.written, 0);
        assert_eq!(cat.len(RecordKind::BlockMeta), 5);
        assert_eq!(cat.disk_bytes().unwrap(), bytes);
    }

    #[test]
    fn delta_examples() {
        let dir = tempfile::tempdir().unwrap();
        let bp = dir.path().join("b.mpck");
        let ep = dir.path().join("e.mpck");
        write_checkpoint(&bp, "base", &[t("w", vec![1.0, 1.0, 3.0, -4.0])]).unwrap();
        write_checkpoint(&ep, "exp", &[t("w", vec![1.0, 2.0, 3.0, -4.0])]).unwrap();
        let base = Checkpoint::open(&bp).unwrap();
        let e = ExpertInput::open(&ep, false).unwrap();
        let mut cat = Catalog::open(dir.path().join("cat")).unwrap();
        let l = IoLedger::new();
        analyze_delta(&e, &base, 2, &mut cat, &l).unwrap();
        let recs: Vec<BlockMetaRecord> = cat.get(&[KeyPart::from("exp")]).unwrap();
        assert_eq!(recs[0].sketch.delta_l2, Some(1.0));
        assert_eq!(recs[1].sketch.delta_l2, Some(0.0));
        assert_eq!(recs[1].sketch.l2_norm, 5.0);
        assert_eq!(recs[1].sketch.max_abs, 4.0);
        assert_eq!(recs[1].sketch.sign_pos_count, 1);
        assert_eq!(recs[0].sketch.delta_base_id.as_deref(), Some("base"));
        assert_eq!(l.expert_read(), 0);

        let d = ExpertInput::open(&ep, true).unwrap();
        analyze_delta(&d, &base, 2, &mut cat, &l).unwrap();
        let recs: Vec<BlockMetaRecord> = cat.get(&[KeyPart::from("exp")]).unwrap();
        assert_eq!(recs[1].sketch.delta_l2, Some(5.0));
    }

    #[test]
    fn mismatched_expert_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let bp = dir.path().join("b.mpck");
        let ep = dir.path().join("e.mpck");
        write_checkpoint(&bp, "base", &[t("w", vec![1.0; 4])]).unwrap();
        write_checkpoint(&ep, "exp", &[t("v", vec![1.0; 4])]).unwrap();
        let base = Checkpoint::open(&bp).unwrap();
        let e = ExpertInput::open(&ep, false).unwrap();
        let mut cat = Catalog::open(dir.path().join("cat")).unwrap();
        let err = analyze_delta(&e, &base, 2, &mut cat, &IoLedger::new()).unwrap_err();
        assert!(matches!(err, crate::Error::MissingTensor(_)));
    }
}
