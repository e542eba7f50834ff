//! Snapshot verification and comparison.

use serde::Serialize;

use crate::canonical::Digest;
use crate::catalog::{CoverageRecord, KeyPart, ManifestRecord, SnapshotId};
use crate::checkpoint::{block_count, block_elements, Checkpoint};
use crate::error::{Error, Result};
use crate::store::Store;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Check {
    pub name: String,
    pub ok: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VerifyReport {
    pub sid: SnapshotId,
    pub ok: bool,
    pub checks: Vec<Check>,
}

fn check(name: &str, ok: bool, detail: impl Into<String>) -> Check {
    Check {
        name: name.to_string(),
        ok,
        detail: detail.into(),
    }
}

/// Recompute the sid and every block hash, and check the budget and the
/// block map against the stored checkpoint.
///
/// Damage to the snapshot shows up as failed checks, not as errors.
pub fn verify_snapshot(store: &Store, sid: &SnapshotId) -> Result<VerifyReport> {
    let manifest = store.load_manifest(sid)?;
    let mut checks = Vec::new();

    let recomputed = manifest.compute_sid()?;
    checks.push(check(
        "sid",
        recomputed == *sid && manifest.sid == *sid,
        format!("manifest content digests to {recomputed}"),
    ));
    checks.push(check(
        "budget",
        manifest.realized_expert_cost <= manifest.budget_b,
        format!(
            "realized expert bytes {} against budget {}",
            manifest.realized_expert_cost, manifest.budget_b
        ),
    ));

    match Checkpoint::open(store.model_path(sid)) {
        Err(e) if e.is_io_or_corruption() => checks.push(check("checkpoint", false, e.to_string())),
        Err(e) => return Err(e),
        Ok(ck) => {
            checks.push(check(
                "model id",
                ck.model_id() == manifest.output_model_id,
                format!("header says {}", ck.model_id()),
            ));
            checks.push(layout_check(&ck, &manifest));
            checks.push(hash_check(&ck, &manifest));
        }
    }
    Ok(VerifyReport {
        sid: *sid,
        ok: checks.iter().all(|c| c.ok),
        checks,
    })
}

fn layout_check(ck: &Checkpoint, manifest: &ManifestRecord) -> Check {
    let s = manifest.block_size;
    for t in &ck.header().tensors {
        let expected = block_count(t, s).unwrap_or(0);
        let got = manifest.block_map.get(&t.name).map_or(0, |v| v.len() as u64);
        if expected != got || s == 0 {
            return check(
                "block map",
                false,
                format!("tensor {}: {got} blocks mapped, {expected} expected", t.name),
            );
        }
    }
    if manifest.block_map.len() != ck.header().tensors.len() {
        return check("block map", false, "block map names tensors the checkpoint lacks");
    }
    check("block map", true, format!("{} blocks", manifest.block_count()))
}

fn hash_check(ck: &Checkpoint, manifest: &ManifestRecord) -> Check {
    let mut bad = Vec::new();
    for (tensor, blocks) in &manifest.block_map {
        let Some(ti) = ck.header().tensor_index(tensor) else {
            continue;
        };
        for b in blocks {
            let ok = ck
                .read_block_raw(ti, b.block_idx, manifest.block_size)
                .is_ok_and(|raw| raw.len() as u64 == b.length && Digest::of_bytes(&raw) == b.hash);
            if !ok {
                bad.push(format!("{tensor}#{}", b.block_idx));
            }
        }
    }
    if bad.is_empty() {
        check("block hashes", true, format!("{} blocks match", manifest.block_count()))
    } else {
        check("block hashes", false, format!("mismatched: {}", bad.join(", ")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockError {
    pub tensor_id: String,
    pub block_idx: u64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiffReport {
    pub sid_a: SnapshotId,
    pub sid_b: SnapshotId,
    /// `||a - b|| / ||b||` over all parameters.
    pub rel_l2: f64,
    /// Nearest-rank 95th percentile of the per-block relative errors.
    pub p95_block_err: f64,
    pub max_block_err: f64,
    pub blocks: u64,
    pub touched_ratio_a: f64,
    pub touched_ratio_b: f64,
    pub block_errors: Vec<BlockError>,
}

/// Relative error, with `||b|| == 0` falling back to the absolute error.
fn relative(diff_sq: f64, ref_sq: f64) -> f64 {
    if ref_sq == 0.0 {
        diff_sq.sqrt()
    } else {
        (diff_sq / ref_sq).sqrt()
    }
}

/// Nearest-rank percentile of unsorted values; 0 for an empty slice.
pub fn percentile_nearest_rank(values: &[f64], pct: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((pct / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

/// Fraction of (expert, block) pairs that were read, from coverage records.
pub fn touched_ratio(store: &Store, manifest: &ManifestRecord) -> Result<f64> {
    let k = manifest.expert_ids.len() as u64;
    let blocks = manifest.block_count();
    if k == 0 || blocks == 0 {
        return Ok(0.0);
    }
    let cov: Vec<CoverageRecord> = store.catalog().get(&[KeyPart::from(manifest.sid)])?;
    let pairs: u64 = cov.iter().map(|c| c.experts.len() as u64).sum();
    Ok(pairs as f64 / (k * blocks) as f64)
}

/// Compare two snapshots with the same tensor structure, block by block,
/// using the block size of `a`.
pub fn diff_snapshots(store: &Store, a: &SnapshotId, b: &SnapshotId) -> Result<DiffReport> {
    let ma = store.load_manifest(a)?;
    let mb = store.load_manifest(b)?;
    let ca = Checkpoint::open(store.model_path(a))?;
    let cb = Checkpoint::open(store.model_path(b))?;
    let (ha, hb) = (ca.header(), cb.header());
    if ha.tensors.len() != hb.tensors.len()
        || ha
            .tensors
            .iter()
            .zip(&hb.tensors)
            .any(|(x, y)| x.name != y.name || x.shape != y.shape || x.dtype != y.dtype)
    {
        return Err(Error::StructureMismatch(format!(
            "{} and {} have different tensor layouts",
            ma.output_model_id, mb.output_model_id
        )));
    }
    let s = ma.block_size;
    let (mut diff_total, mut ref_total) = (0f64, 0f64);
    let mut block_errors = Vec::new();
    for (ti, t) in ha.tensors.iter().enumerate() {
        for blk in 0..block_count(t, s)? {
            let r = block_elements(t, s, blk)?;
            let va = ca.read_block_at(ti, blk, s)?.values;
            let vb = cb.read_block_at(ti, blk, s)?.values;
            debug_assert_eq!(va.len() as u64, r.end - r.start);
            let (mut d, mut n) = (0f64, 0f64);
            for (x, y) in va.iter().zip(&vb) {
                let e = *x as f64 - *y as f64;
                d += e * e;
                n += (*y as f64) * (*y as f64);
            }
            diff_total += d;
            ref_total += n;
            block_errors.push(BlockError {
                tensor_id: t.name.clone(),
                block_idx: blk,
                rel_err: relative(d, n),
            });
        }
    }
    let errs: Vec<f64> = block_errors.iter().map(|e| e.rel_err).collect();
    Ok(DiffReport {
        sid_a: *a,
        sid_b: *b,
        rel_l2: relative(diff_total, ref_total),
        p95_block_err: percentile_nearest_rank(&errs, 95.0),
        max_block_err: errs.iter().copied().fold(0.0, f64::max),
        blocks: errs.len() as u64,
        touched_ratio_a: touched_ratio(store, &ma)?,
        touched_ratio_b: touched_ratio(store, &mb)?,
        block_errors,
    })
}
