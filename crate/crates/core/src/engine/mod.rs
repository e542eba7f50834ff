//! Plan execution: stream blocks, apply the operator, stage, validate, publish.
//!
//! Every output block is materialized. For each block the base is read once,
//! the expert blocks selected by the plan are pulled, and the operator output
//! is written at its final offset in a preallocated staging file. Tensors may
//! be processed by parallel workers; positioned writes keep the output bytes
//! independent of scheduling.

mod delta;
mod staging;

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

pub use delta::{to_delta, DeltaIterator, TensorCursor};
pub use staging::{atomic_publish, now_ms, StagingHandle, StagingState, Steps};

use crate::canonical::{canonical_digest, to_value, Digest};
use crate::catalog::{
    expert_set_digest, BlockObject, BlockRange, CoverageRecord, ManifestRecord, MergeMode, RecordKind, SnapshotId,
    TouchMapRecord,
};
use crate::checkpoint::{block_count, block_elements, Checkpoint, CheckpointHeader, CheckpointWriter};
use crate::cost::{naive_expert_cost, selection_cost};
use crate::error::{Error, Result};
use crate::metrics::{Category, IoLedger};
use crate::operators::{self, DeltaBatch, OperatorSpec};
use crate::planner::{check_structure, ExpertInput, MergePlan};
use crate::store::{LineageLine, Store};

/// Environment variable naming a step at which to abort (debug builds of the CLI).
pub const CRASH_ENV: &str = "MERGEPIPE_CRASH_AT_STEP";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecOptions {
    /// Worker threads for tensor-level parallelism; 0 uses all cores.
    pub threads: usize,
    pub crash_at_step: Option<u64>,
    /// Return an already published snapshot of the same plan without re-reading inputs.
    pub reuse: bool,
}

impl Default for ExecOptions {
    fn default() -> Self {
        ExecOptions {
            threads: 1,
            crash_at_step: None,
            reuse: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExecOutcome {
    pub sid: SnapshotId,
    pub manifest: ManifestRecord,
    pub reused: bool,
    /// Number of pipeline steps that started.
    pub steps: u64,
}

/// Steps in a run over `tensors` tensors: staging, header, one per tensor,
/// fsync, validate, manifest, lineage, manifest file, move, commit, catalog.
pub fn step_count(tensors: usize) -> u64 {
    tensors as u64 + 10
}

#[derive(Serialize)]
struct OutputIdentity<'a> {
    base_id: &'a str,
    expert_ids: &'a [String],
    op: OperatorSpec,
}

/// Model id of a merge output; independent of budget and mode, so a naive
/// merge and a full-budget plan of the same inputs write identical files.
pub fn output_model_id(base_id: &str, expert_ids: &[String], op: &OperatorSpec) -> Result<String> {
    let d = canonical_digest(&OutputIdentity {
        base_id,
        expert_ids,
        op: op.normalized(),
    })?;
    Ok(format!("merged-{}", &d.to_hex()[..16]))
}

fn output_header(base: &CheckpointHeader, model_id: &str) -> Result<CheckpointHeader> {
    CheckpointHeader::layout(
        model_id,
        base.tensors
            .iter()
            .map(|t| (t.name.as_str(), t.dtype, t.shape.as_slice())),
    )
}

/// Per block: (experts read, experts with a nonzero delta).
type BlockCoverage = Vec<(Vec<u32>, Vec<u32>)>;

struct TensorOutput {
    tensor_id: String,
    blocks: Vec<BlockObject>,
    coverage: BlockCoverage,
}

/// Apply the operator to one batch and write the result.
fn emit_block(
    writer: &CheckpointWriter,
    tensor: usize,
    block_size: u64,
    batch: &DeltaBatch,
    op: &OperatorSpec,
    k_total: usize,
    ledger: &IoLedger,
) -> Result<(BlockObject, Vec<u32>, Vec<u32>)> {
    let meta = &writer.header().tensors[tensor];
    let out = operators::apply(op, batch, k_total)?;
    let bytes = meta.dtype.encode(&out);
    let offset = writer.write_block(tensor, batch.block_idx, block_size, &bytes)?;
    ledger.charge(Category::Out, bytes.len() as u64);
    let experts: Vec<u32> = batch.deltas.iter().map(|(i, _)| *i).collect();
    let surviving = batch
        .deltas
        .iter()
        .filter(|(_, d)| d.iter().any(|v| *v != 0.0))
        .map(|(i, _)| *i)
        .collect();
    Ok((
        BlockObject {
            block_idx: batch.block_idx,
            offset,
            length: bytes.len() as u64,
            hash: Digest::of_bytes(&bytes),
        },
        experts,
        surviving,
    ))
}

/// Shared description of a run, independent of how blocks are produced.
struct RunSpec<'a> {
    mode: MergeMode,
    plan_id: Digest,
    budget_b: u64,
    op: OperatorSpec,
    block_size: u64,
    base: &'a Checkpoint,
    experts: &'a [ExpertInput],
}

fn run<F>(
    spec: &RunSpec<'_>,
    store: &mut Store,
    ledger: &IoLedger,
    opts: &ExecOptions,
    produce: F,
) -> Result<ExecOutcome>
where
    F: Fn(usize, &CheckpointWriter, &IoLedger) -> Result<TensorOutput> + Sync,
{
    let started = Instant::now();
    let steps = Steps::new(opts.crash_at_step);
    let local = IoLedger::new();
    let expert_ids: Vec<String> = spec.experts.iter().map(|e| e.model_id().to_string()).collect();
    let out_id = output_model_id(spec.base.model_id(), &expert_ids, &spec.op)?;
    let header = output_header(spec.base.header(), &out_id)?;

    steps.step("open staging")?;
    let dir = StagingHandle::create_dir(store, &out_id)?;
    let result = (|| -> Result<ExecOutcome> {
        steps.step("write header")?;
        let mut staging = StagingHandle::open(dir.clone(), header)?;
        let n = staging.writer().header().tensors.len();
        let work = |ti: usize| -> Result<TensorOutput> {
            let out = produce(ti, staging.writer(), &local)?;
            steps.step(&format!("tensor {}", out.tensor_id))?;
            Ok(out)
        };
        let outputs: Vec<TensorOutput> = if opts.threads == 1 || n <= 1 {
            (0..n).map(work).collect::<Result<_>>()?
        } else {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(opts.threads)
                .build()
                .map_err(|e| Error::PlanMismatch(format!("thread pool: {e}")))?;
            pool.install(|| (0..n).into_par_iter().map(work).collect::<Result<_>>())?
        };

        steps.step("fsync")?;
        staging.sync()?;
        let mut coverage_rows = Vec::with_capacity(outputs.len());
        for o in outputs {
            staging.record_tensor(o.tensor_id.clone(), o.blocks);
            coverage_rows.push((o.tensor_id, o.coverage));
        }

        steps.step("validate hashes")?;
        staging.validate(&local)?;

        steps.step("build manifest")?;
        let mut manifest = ManifestRecord {
            sid: SnapshotId(Digest::default()),
            plan_id: spec.plan_id,
            mode: spec.mode,
            base_id: spec.base.model_id().to_string(),
            expert_ids: expert_ids.clone(),
            op: spec.op.normalized(),
            budget_b: spec.budget_b,
            block_size: spec.block_size,
            realized_expert_cost: local.expert_read(),
            output_model_id: out_id.clone(),
            output_root: String::new(),
            created_at: now_ms(),
            block_map: staging.block_map().clone(),
        };
        manifest.sid = manifest.compute_sid()?;
        manifest.output_root = format!("snapshots/{}", manifest.sid);
        let lineage = lineage(&manifest, &coverage_rows)?;

        let published = atomic_publish(store, &mut staging, &manifest, &lineage, &steps, &local)?;
        Ok(ExecOutcome {
            sid: published.sid,
            manifest: published,
            reused: false,
            steps: steps.taken(),
        })
    })();

    absorb(ledger, &local);
    ledger.set_wall_ms(started.elapsed().as_millis() as u64);
    match result {
        Err(e @ Error::InjectedCrash { .. }) => Err(e),
        Err(e) => {
            let _ = crate::store::remove_any(&dir);
            Err(e)
        }
        ok => ok,
    }
}

fn absorb(into: &IoLedger, from: &IoLedger) {
    for c in Category::ALL {
        into.charge(c, from.bytes(c));
    }
}

fn lineage(manifest: &ManifestRecord, coverage: &[(String, BlockCoverage)]) -> Result<Vec<LineageLine>> {
    let mut out = Vec::new();
    for (tensor_id, blocks) in coverage {
        out.push(LineageLine {
            kind: RecordKind::TouchMap,
            record: to_value(&TouchMapRecord {
                sid: manifest.sid,
                tensor_id: tensor_id.clone(),
                touched_blocks: vec![BlockRange {
                    start: 0,
                    end: blocks.len() as u64,
                }]
                .into_iter()
                .filter(|r| !r.is_empty())
                .collect(),
            })?,
        });
        for (b, (experts, surviving)) in blocks.iter().enumerate() {
            let ids: Vec<&str> = experts
                .iter()
                .map(|i| manifest.expert_ids[*i as usize].as_str())
                .collect();
            out.push(LineageLine {
                kind: RecordKind::Coverage,
                record: to_value(&CoverageRecord {
                    sid: manifest.sid,
                    tensor_id: tensor_id.clone(),
                    block_idx: b as u64,
                    expert_set_digest: expert_set_digest(&ids),
                    experts: experts.clone(),
                    surviving: surviving.clone(),
                })?,
            });
        }
    }
    Ok(out)
}

fn check_plan(plan: &MergePlan, base: &Checkpoint, experts: &[ExpertInput]) -> Result<()> {
    let mismatch = |what: &str| Err(Error::PlanMismatch(what.to_string()));
    if plan.base_id != base.model_id() {
        return mismatch("base model id");
    }
    let ids: Vec<&str> = experts.iter().map(|e| e.model_id()).collect();
    if plan.expert_ids.iter().map(String::as_str).ne(ids.iter().copied()) {
        return mismatch("expert model ids or order");
    }
    if plan.selected.len() != experts.len() || plan.expert_is_delta.iter().ne(experts.iter().map(|e| &e.is_delta)) {
        return mismatch("expert delta flags");
    }
    let order: Vec<&str> = base.header().tensors.iter().map(|t| t.name.as_str()).collect();
    if plan.order.iter().map(String::as_str).ne(order.iter().copied()) {
        return mismatch("tensor order");
    }
    if plan.block_size == 0 {
        return Err(Error::ZeroBlockSize);
    }
    check_structure(base.header(), experts)?;
    plan.op.validate()?;
    if plan.to_record()?.plan_id != plan.plan_id {
        return mismatch("plan_id does not match plan content");
    }
    Ok(())
}

fn find_reusable(store: &Store, plan_id: &Digest, mode: MergeMode) -> Result<Option<ManifestRecord>> {
    let all: Vec<ManifestRecord> = store.catalog().get(&[])?;
    Ok(all
        .into_iter()
        .find(|m| m.plan_id == *plan_id && m.mode == mode && store.is_visible(&m.sid)))
}

/// Execute a plan: read the full base, only the selected expert blocks, and
/// publish a complete output snapshot.
///
/// The expert bytes the selection implies are computed from the checkpoint
/// layouts before any data is read; a plan over its budget is refused.
pub fn execute_merge(
    plan: &MergePlan,
    base: &Checkpoint,
    experts: &[ExpertInput],
    store: &mut Store,
    ledger: &IoLedger,
    opts: &ExecOptions,
) -> Result<ExecOutcome> {
    check_plan(plan, base, experts)?;
    let required = selection_cost(plan, base.header())?;
    if required > plan.budget_b {
        return Err(Error::BudgetExceeded {
            required,
            allowed: plan.budget_b,
        });
    }
    if required != plan.estimated_expert_cost {
        return Err(Error::PlanMismatch(format!(
            "selection reads {required} bytes, plan estimates {}",
            plan.estimated_expert_cost
        )));
    }
    if opts.reuse {
        if let Some(m) = find_reusable(store, &plan.plan_id, MergeMode::Planned)? {
            return Ok(ExecOutcome {
                sid: m.sid,
                manifest: m,
                reused: true,
                steps: 0,
            });
        }
    }

    let spec = RunSpec {
        mode: MergeMode::Planned,
        plan_id: plan.plan_id,
        budget_b: plan.budget_b,
        op: plan.op,
        block_size: plan.block_size,
        base,
        experts,
    };
    let k = experts.len();
    let s = plan.block_size;
    run(&spec, store, ledger, opts, |ti, writer, ledger| {
        let meta = &base.header().tensors[ti];
        let pulls = DeltaIterator::new(experts, ledger, s);
        let cursor = pulls.cursor(&meta.name)?;
        let n = block_count(meta, s)?;
        let selected = plan.experts_per_block(&meta.name, n);
        let mut blocks = Vec::with_capacity(n as usize);
        let mut coverage = Vec::with_capacity(n as usize);
        for b in 0..n {
            let base_block = base.read_block_at(ti, b, s)?;
            ledger.charge(Category::Base, base_block.raw_bytes);
            let first = block_elements(meta, s, b)?.start;
            let batch = pulls.pull(&cursor, b, first, base_block.values, &selected[b as usize])?;
            let (obj, used, surviving) = emit_block(writer, ti, s, &batch, &plan.op, k, ledger)?;
            blocks.push(obj);
            coverage.push((used, surviving));
        }
        Ok(TensorOutput {
            tensor_id: meta.name.clone(),
            blocks,
            coverage,
        })
    })
}

/// Stateless baseline: read every expert tensor in full, merge with every
/// block selected, and publish through the same commit path.
pub fn naive_merge(
    base: &Checkpoint,
    experts: &[ExpertInput],
    op: OperatorSpec,
    block_size: u64,
    store: &mut Store,
    ledger: &IoLedger,
    opts: &ExecOptions,
) -> Result<ExecOutcome> {
    op.validate()?;
    if block_size == 0 {
        return Err(Error::ZeroBlockSize);
    }
    check_structure(base.header(), experts)?;
    let full = MergePlan::full(base, experts, op, block_size)?;
    let spec = RunSpec {
        mode: MergeMode::Naive,
        plan_id: full.plan_id,
        budget_b: naive_expert_cost(experts.iter().map(|e| e.checkpoint.header())),
        op: op.normalized(),
        block_size,
        base,
        experts,
    };
    let k = experts.len();
    let all: Vec<u32> = (0..k as u32).collect();
    run(&spec, store, ledger, opts, |ti, writer, ledger| {
        let meta = &base.header().tensors[ti];
        let base_vals = base.read_tensor(ti)?;
        ledger.charge(Category::Base, meta.length_bytes);
        let mut expert_vals = Vec::with_capacity(k);
        for e in experts {
            let eti = e.checkpoint.tensor_index(&meta.name)?;
            expert_vals.push(e.checkpoint.read_tensor(eti)?);
            ledger.charge(Category::Expert, meta.length_bytes);
        }
        let n = block_count(meta, block_size)?;
        let mut blocks = Vec::with_capacity(n as usize);
        let mut coverage = Vec::with_capacity(n as usize);
        for b in 0..n {
            let r = block_elements(meta, block_size, b)?;
            let (lo, hi) = (r.start as usize, r.end as usize);
            let base_block = base_vals[lo..hi].to_vec();
            let deltas = all
                .iter()
                .map(|&i| {
                    let e = &experts[i as usize];
                    (
                        i,
                        to_delta(expert_vals[i as usize][lo..hi].to_vec(), &base_block, e.is_delta),
                    )
                })
                .collect();
            let batch = DeltaBatch {
                tensor_id: meta.name.clone(),
                block_idx: b,
                first_element: r.start,
                base_values: base_block,
                deltas,
            };
            let (obj, used, surviving) = emit_block(writer, ti, block_size, &batch, &spec.op, k, ledger)?;
            blocks.push(obj);
            coverage.push((used, surviving));
        }
        Ok(TensorOutput {
            tensor_id: meta.name.clone(),
            blocks,
            coverage,
        })
    })
}
