//! Experiment drivers shared by the CLI and the acceptance suite.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::analyzer::{analyze_delta, analyze_model};
use crate::canonical::Digest;
use crate::catalog::ManifestRecord;
use crate::checkpoint::{file_digest, Checkpoint};
use crate::cost::naive_expert_cost;
use crate::engine::{execute_merge, naive_merge, ExecOptions, ExecOutcome};
use crate::error::{IoContext, Result};
use crate::inspect::touched_ratio;
use crate::metrics::{export, IoLedger, RunContext, RunMode, RunReport};
use crate::operators::OperatorSpec;
use crate::planner::{plan_gen, Budget, ExpertInput, MergePlan, PlanRequest};
use crate::store::Store;
use crate::workload::Workload;

/// Inputs of one merge experiment, opened once.
pub struct Inputs {
    pub base: Checkpoint,
    pub experts: Vec<ExpertInput>,
}

impl Inputs {
    pub fn open(base: &Path, experts: &[PathBuf]) -> Result<Self> {
        Ok(Inputs {
            base: Checkpoint::open(base)?,
            experts: experts
                .iter()
                .map(|p| ExpertInput::open(p, false))
                .collect::<Result<_>>()?,
        })
    }

    pub fn naive_cost(&self) -> u64 {
        naive_expert_cost(self.experts.iter().map(|e| e.checkpoint.header()))
    }
}

/// One finished run with the details the CSV row leaves out.
#[derive(Debug, Clone)]
pub struct BenchRun {
    pub report: RunReport,
    pub manifest: ManifestRecord,
    pub plan: Option<MergePlan>,
    pub plan_ms: f64,
    pub merge_ms: f64,
    pub touched_fraction: f64,
    pub output_digest: Digest,
    /// Catalog size after the run plus the manifest file.
    pub catalog_manifest_bytes: u64,
}

/// Analyze the base and every expert at `block_size`; returns metadata bytes.
pub fn analyze_all(store: &mut Store, inputs: &Inputs, block_size: u64) -> Result<u64> {
    let ledger = IoLedger::new();
    analyze_model(&inputs.base, block_size, store.catalog_mut(), &ledger)?;
    for e in &inputs.experts {
        analyze_delta(e, &inputs.base, block_size, store.catalog_mut(), &ledger)?;
    }
    store.catalog_mut().flush()?;
    Ok(ledger.meta_io())
}

fn finish(
    store: &Store,
    out: ExecOutcome,
    ledger: &IoLedger,
    ctx: RunContext,
    plan: Option<MergePlan>,
    plan_ms: f64,
    merge_ms: f64,
) -> Result<BenchRun> {
    let manifest_path = store.manifest_path(&out.sid);
    let manifest_bytes = std::fs::metadata(&manifest_path).at(&manifest_path)?.len();
    Ok(BenchRun {
        report: export(ledger, &ctx),
        touched_fraction: touched_ratio(store, &out.manifest)?,
        output_digest: file_digest(&store.model_path(&out.sid))?,
        catalog_manifest_bytes: store.catalog().disk_bytes()? + manifest_bytes,
        manifest: out.manifest,
        plan,
        plan_ms,
        merge_ms,
    })
}

pub fn run_naive(
    store: &mut Store,
    inputs: &Inputs,
    op: OperatorSpec,
    block_size: u64,
    opts: &ExecOptions,
) -> Result<BenchRun> {
    let ledger = IoLedger::new();
    let t = Instant::now();
    let out = naive_merge(&inputs.base, &inputs.experts, op, block_size, store, &ledger, opts)?;
    let merge_ms = t.elapsed().as_secs_f64() * 1e3;
    let ctx = RunContext {
        mode: RunMode::Naive,
        k: inputs.experts.len(),
        op: op.kind.to_string(),
        block_size,
        budget: out.manifest.budget_b,
        sid: out.sid.to_string(),
    };
    finish(store, out, &ledger, ctx, None, 0.0, merge_ms)
}

/// Plan under `budget` and execute. Expects [`analyze_all`] to have run at
/// this block size. Planning metadata I/O is included in the row's `meta_io`.
pub fn run_planned(
    store: &mut Store,
    inputs: &Inputs,
    op: OperatorSpec,
    budget: Budget,
    block_size: u64,
    opts: &ExecOptions,
) -> Result<BenchRun> {
    let ledger = IoLedger::new();
    let budget_b = budget.resolve(inputs.naive_cost());
    let t = Instant::now();
    let plan = plan_gen(
        &PlanRequest {
            base: &inputs.base,
            experts: &inputs.experts,
            op,
            budget_b,
            block_size,
        },
        store.catalog_mut(),
        &ledger,
    )?;
    store.catalog_mut().flush()?;
    let plan_ms = t.elapsed().as_secs_f64() * 1e3;
    let t = Instant::now();
    let out = execute_merge(&plan, &inputs.base, &inputs.experts, store, &ledger, opts)?;
    let merge_ms = t.elapsed().as_secs_f64() * 1e3;
    ledger.set_wall_ms((plan_ms + merge_ms) as u64);
    let ctx = RunContext {
        mode: RunMode::Mergepipe,
        k: inputs.experts.len(),
        op: op.kind.to_string(),
        block_size,
        budget: budget_b,
        sid: out.sid.to_string(),
    };
    finish(store, out, &ledger, ctx, Some(plan), plan_ms, merge_ms)
}

/// For each K, a naive run and a budgeted run over the first K experts.
pub fn bench_scaling(
    store: &mut Store,
    workload: &Workload,
    ks: &[usize],
    op: OperatorSpec,
    budget: Budget,
    block_size: u64,
    opts: &ExecOptions,
) -> Result<Vec<BenchRun>> {
    let all = Inputs::open(&workload.base, &workload.experts)?;
    analyze_all(store, &all, block_size)?;
    let mut rows = Vec::new();
    for &k in ks {
        let inputs = Inputs::open(&workload.base, &workload.experts[..k.min(workload.experts.len())])?;
        rows.push(run_naive(store, &inputs, op, block_size, opts)?);
        rows.push(run_planned(store, &inputs, op, budget, block_size, opts)?);
    }
    Ok(rows)
}

/// Budgeted runs at each fraction of the naive expert cost.
pub fn bench_budget(
    store: &mut Store,
    inputs: &Inputs,
    fractions: &[f64],
    op: OperatorSpec,
    block_size: u64,
    opts: &ExecOptions,
) -> Result<Vec<BenchRun>> {
    analyze_all(store, inputs, block_size)?;
    fractions
        .iter()
        .map(|f| run_planned(store, inputs, op, Budget::Fraction(*f), block_size, opts))
        .collect()
}

/// Budgeted runs at each block size, re-analyzing at that size first.
pub fn bench_block_size(
    store: &mut Store,
    inputs: &Inputs,
    sizes: &[u64],
    op: OperatorSpec,
    budget: Budget,
    opts: &ExecOptions,
) -> Result<Vec<BenchRun>> {
    let mut rows = Vec::new();
    for &s in sizes {
        analyze_all(store, inputs, s)?;
        rows.push(run_planned(store, inputs, op, budget, s, opts)?);
    }
    Ok(rows)
}

/// Repeat one budgeted merge in fresh stores under `root`, so every run
/// actually writes and publishes its output.
pub fn bench_stability(
    root: &Path,
    inputs: &Inputs,
    runs: usize,
    op: OperatorSpec,
    budget: Budget,
    block_size: u64,
    opts: &ExecOptions,
) -> Result<Vec<BenchRun>> {
    (0..runs)
        .map(|i| {
            let mut store = Store::open(root.join(format!("run-{i}")))?;
            analyze_all(&mut store, inputs, block_size)?;
            run_planned(&mut store, inputs, op, budget, block_size, opts)
        })
        .collect()
}
