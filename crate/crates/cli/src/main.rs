use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use mergepipe::analyzer::{analyze_delta, analyze_model};
use mergepipe::bench::{self, BenchRun, Inputs};
use mergepipe::checkpoint::DEFAULT_BLOCK_SIZE;
use mergepipe::cost::{estimate_total, naive_expert_cost};
use mergepipe::engine::{execute_merge, naive_merge, ExecOptions};
use mergepipe::inspect::{diff_snapshots, touched_ratio, verify_snapshot};
use mergepipe::metrics::{export, write_csv, write_reports, RunContext, RunMode, RunReport};
use mergepipe::planner::{plan_gen, tensor_fallback, PlanFile, PlanRequest};
use mergepipe::workload::{generate, Workload, WorkloadSpec};
use mergepipe::{Budget, Checkpoint, DType, Error, ExpertInput, IoLedger, OperatorKind, OperatorSpec, Store};

#[derive(Parser)]
#[command(name = "mergepipe", version, about = "Budgeted block-level model merging")]
struct Cli {
    /// Store directory holding the catalog and snapshots.
    #[arg(long, global = true, default_value = ".mergepipe")]
    catalog: PathBuf,
    /// Block size in elements.
    #[arg(long, global = true, default_value_t = DEFAULT_BLOCK_SIZE)]
    block_size: u64,
    /// Write run metrics as CSV, or JSON when the name ends in `.json`.
    #[arg(long, global = true)]
    metrics_out: Option<PathBuf>,
    /// Seed for workload generation and DARE draws.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic base checkpoint and experts.
    Gen {
        #[arg(long)]
        out: PathBuf,
        /// Parameters in the base model.
        #[arg(long, default_value_t = 16 << 20)]
        elements: u64,
        #[arg(long, short = 'k', default_value_t = 8)]
        experts: usize,
        #[arg(long, default_value_t = 1.0)]
        divergence: f64,
        #[arg(long, default_value = "f32")]
        dtype: DType,
    },
    /// Record block metadata for a checkpoint; with --base, also its divergence from the base.
    Analyze {
        model: PathBuf,
        #[arg(long)]
        base: Option<PathBuf>,
        /// The model stores deltas rather than full weights.
        #[arg(long, requires = "base")]
        delta: bool,
    },
    /// Select expert blocks under a budget.
    Plan {
        #[command(flatten)]
        inputs: InputArgs,
        #[command(flatten)]
        op: OpArgs,
        /// Bytes (e.g. 512MiB) or a fraction of the naive expert cost (e.g. 0.3).
        #[arg(long)]
        budget: Budget,
        /// Rank whole tensors instead of blocks.
        #[arg(long)]
        tensor_level: bool,
        /// Write the plan here instead of printing it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Execute a plan and publish the result.
    Merge {
        #[arg(long)]
        plan: PathBuf,
        #[command(flatten)]
        exec: ExecArgs,
    },
    /// Merge reading every expert byte.
    Naive {
        #[command(flatten)]
        inputs: InputArgs,
        #[command(flatten)]
        op: OpArgs,
        #[command(flatten)]
        exec: ExecArgs,
    },
    /// Show a snapshot manifest, or the header of a checkpoint file.
    Inspect { target: String },
    /// Recheck a snapshot's identity, hashes and budget.
    Verify { sid: String },
    /// Compare two snapshots block by block.
    Diff {
        a: String,
        b: String,
        /// Include every block's error.
        #[arg(long)]
        blocks: bool,
    },
    /// Estimated I/O of a plan.
    Cost { plan: PathBuf },
    /// Experiment sweeps over a generated workload.
    #[command(subcommand)]
    Bench(BenchCommand),
}

#[derive(Args)]
struct InputArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    experts: Vec<PathBuf>,
    /// The experts store deltas rather than full weights.
    #[arg(long)]
    delta: bool,
}

impl InputArgs {
    fn open(&self) -> anyhow::Result<(Checkpoint, Vec<ExpertInput>)> {
        let base = Checkpoint::open(&self.base)?;
        let experts = self
            .experts
            .iter()
            .map(|p| ExpertInput::open(p, self.delta))
            .collect::<mergepipe::Result<_>>()?;
        Ok((base, experts))
    }
}

#[derive(Args, Clone)]
struct OpArgs {
    #[arg(long, default_value = "ties")]
    op: OperatorKind,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    density: Option<f64>,
    #[arg(long)]
    drop_p: Option<f64>,
}

impl OpArgs {
    fn spec(&self, seed: u64) -> anyhow::Result<OperatorSpec> {
        let mut op = OperatorSpec::new(self.op);
        op.seed = seed;
        if let Some(v) = self.lambda {
            op.lambda = v;
        }
        if let Some(v) = self.density {
            op.density = v;
        }
        if let Some(v) = self.drop_p {
            op.drop_p = v;
        }
        op.validate()?;
        Ok(op.normalized())
    }
}

#[derive(Args, Clone)]
struct ExecArgs {
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Return an existing snapshot of the same plan without re-reading inputs.
    #[arg(long)]
    reuse: bool,
}

impl ExecArgs {
    fn options(&self) -> anyhow::Result<ExecOptions> {
        Ok(ExecOptions {
            threads: self.threads,
            crash_at_step: crash_step()?,
            reuse: self.reuse,
        })
    }
}

#[cfg(debug_assertions)]
fn crash_step() -> anyhow::Result<Option<u64>> {
    match std::env::var(mergepipe::engine::CRASH_ENV) {
        Ok(v) => Ok(Some(
            v.parse()
                .with_context(|| format!("bad {}", mergepipe::engine::CRASH_ENV))?,
        )),
        Err(_) => Ok(None),
    }
}

#[cfg(not(debug_assertions))]
fn crash_step() -> anyhow::Result<Option<u64>> {
    Ok(None)
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Naive and budgeted runs for each expert count.
    Scaling {
        #[command(flatten)]
        common: BenchArgs,
        #[arg(long, value_delimiter = ',', default_value = "2,4,6,8,10,12,14,16,18,20")]
        ks: Vec<usize>,
        #[arg(long, default_value = "32MiB")]
        budget: Budget,
    },
    /// Budgeted runs at several fractions of the naive cost.
    Budget {
        #[command(flatten)]
        common: BenchArgs,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0"
        )]
        fractions: Vec<f64>,
    },
    /// Budgeted runs at several block sizes.
    BlockSize {
        #[command(flatten)]
        common: BenchArgs,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "16384,32768,65536,131072,262144,524288"
        )]
        sizes: Vec<u64>,
        #[arg(long, default_value = "0.1")]
        budget: Budget,
    },
    /// The same budgeted merge repeated in fresh stores.
    Stability {
        #[command(flatten)]
        common: BenchArgs,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long, default_value = "0.1")]
        budget: Budget,
    },
}

#[derive(Args)]
struct BenchArgs {
    /// Directory written by `gen`.
    #[arg(long)]
    workload: PathBuf,
    #[command(flatten)]
    op: OpArgs,
    #[command(flatten)]
    exec: ExecArgs,
}

fn print_json(v: &impl serde::Serialize) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn emit_reports(path: Option<&Path>, rows: &[RunReport]) -> anyhow::Result<()> {
    match path {
        Some(p) => write_reports(p, rows)?,
        None => write_csv(std::io::stdout().lock(), rows)?,
    }
    Ok(())
}

fn load_plan(path: &Path) -> anyhow::Result<PlanFile> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| Error::MalformedRecord(format!("{}: {e}", path.display())).into())
}

/// Outcome of a command that did not fail outright.
enum Status {
    Ok,
    VerificationFailed,
}

fn run(cli: Cli) -> anyhow::Result<Status> {
    let s = cli.block_size;
    match cli.command {
        Command::Gen {
            out,
            elements,
            experts,
            divergence,
            dtype,
        } => {
            let mut spec = WorkloadSpec::new(cli.seed, elements, experts, divergence);
            spec.dtype = dtype;
            let w = generate(&out, &spec)?;
            print_json(&json!({ "base": w.base, "experts": w.experts }))?;
        }
        Command::Analyze { model, base, delta } => {
            let mut store = Store::open(&cli.catalog)?;
            let ledger = IoLedger::new();
            let outcome = match base {
                None => analyze_model(&Checkpoint::open(&model)?, s, store.catalog_mut(), &ledger)?,
                Some(b) => {
                    let base = Checkpoint::open(&b)?;
                    let expert = ExpertInput::open(&model, delta)?;
                    analyze_delta(&expert, &base, s, store.catalog_mut(), &ledger)?
                }
            };
            store.catalog_mut().flush()?;
            print_json(&json!({
                "blocks": outcome.blocks,
                "written": outcome.written,
                "meta_io": ledger.meta_io(),
            }))?;
        }
        Command::Plan {
            inputs,
            op,
            budget,
            tensor_level,
            out,
        } => {
            let mut store = Store::open(&cli.catalog)?;
            let (base, experts) = inputs.open()?;
            let naive = naive_expert_cost(experts.iter().map(|e| e.checkpoint.header()));
            let req = PlanRequest {
                base: &base,
                experts: &experts,
                op: op.spec(cli.seed)?,
                budget_b: budget.resolve(naive),
                block_size: s,
            };
            let ledger = IoLedger::new();
            let plan = if tensor_level {
                tensor_fallback(&req, store.catalog_mut(), &ledger)?
            } else {
                plan_gen(&req, store.catalog_mut(), &ledger)?
            };
            store.catalog_mut().flush()?;
            let file = PlanFile {
                base_path: std::path::absolute(&inputs.base)?,
                expert_paths: inputs
                    .experts
                    .iter()
                    .map(std::path::absolute)
                    .collect::<Result<_, _>>()?,
                plan,
            };
            match out {
                None => print_json(&file)?,
                Some(p) => {
                    let text = serde_json::to_string_pretty(&file)?;
                    std::fs::write(&p, text + "\n").with_context(|| format!("writing {}", p.display()))?;
                    print_json(&json!({
                        "plan_id": file.plan.plan_id,
                        "budget_b": file.plan.budget_b,
                        "estimated_expert_cost": file.plan.estimated_expert_cost,
                        "naive_expert_cost": naive,
                        "selected_pairs": file.plan.selected_pairs(),
                        "fallback_used": file.plan.fallback_used,
                        "fallback_cause": file.plan.fallback_cause,
                    }))?;
                }
            }
        }
        Command::Merge { plan, exec } => {
            let file = load_plan(&plan)?;
            let base = Checkpoint::open(&file.base_path)?;
            if file.expert_paths.len() != file.plan.expert_is_delta.len() {
                bail!(Error::PlanMismatch(
                    "expert paths and plan experts differ in number".into()
                ));
            }
            let experts = file
                .expert_paths
                .iter()
                .zip(&file.plan.expert_is_delta)
                .map(|(p, d)| ExpertInput::open(p, *d))
                .collect::<mergepipe::Result<Vec<_>>>()?;
            let mut store = Store::open(&cli.catalog)?;
            let ledger = IoLedger::new();
            let t = std::time::Instant::now();
            let out = execute_merge(&file.plan, &base, &experts, &mut store, &ledger, &exec.options()?)?;
            ledger.set_wall_ms(t.elapsed().as_millis() as u64);
            let ctx = RunContext {
                mode: RunMode::Mergepipe,
                k: experts.len(),
                op: file.plan.op.kind.to_string(),
                block_size: file.plan.block_size,
                budget: file.plan.budget_b,
                sid: out.sid.to_string(),
            };
            finish_merge(
                &store,
                &out.manifest,
                out.reused,
                export(&ledger, &ctx),
                cli.metrics_out.as_deref(),
            )?;
        }
        Command::Naive { inputs, op, exec } => {
            let (base, experts) = inputs.open()?;
            let op = op.spec(cli.seed)?;
            let mut store = Store::open(&cli.catalog)?;
            let ledger = IoLedger::new();
            let t = std::time::Instant::now();
            let out = naive_merge(&base, &experts, op, s, &mut store, &ledger, &exec.options()?)?;
            ledger.set_wall_ms(t.elapsed().as_millis() as u64);
            let ctx = RunContext {
                mode: RunMode::Naive,
                k: experts.len(),
                op: op.kind.to_string(),
                block_size: s,
                budget: out.manifest.budget_b,
                sid: out.sid.to_string(),
            };
            finish_merge(
                &store,
                &out.manifest,
                out.reused,
                export(&ledger, &ctx),
                cli.metrics_out.as_deref(),
            )?;
        }
        Command::Inspect { target } => {
            let path = Path::new(&target);
            if path.is_file() {
                let ck = Checkpoint::open(path)?;
                print_json(ck.header())?;
            } else {
                let store = Store::open_read_only(&cli.catalog)?;
                let sid = store.resolve(&target)?;
                let manifest = store.load_manifest(&sid)?;
                let touched = touched_ratio(&store, &manifest)?;
                print_json(&json!({ "manifest": manifest, "touched_ratio": touched }))?;
            }
        }
        Command::Verify { sid } => {
            let store = Store::open_read_only(&cli.catalog)?;
            let sid = store.resolve(&sid)?;
            let report = verify_snapshot(&store, &sid)?;
            print_json(&report)?;
            if !report.ok {
                return Ok(Status::VerificationFailed);
            }
        }
        Command::Diff { a, b, blocks } => {
            let store = Store::open_read_only(&cli.catalog)?;
            let (a, b) = (store.resolve(&a)?, store.resolve(&b)?);
            let mut report = diff_snapshots(&store, &a, &b)?;
            if !blocks {
                report.block_errors.clear();
            }
            print_json(&report)?;
        }
        Command::Cost { plan } => {
            let file = load_plan(&plan)?;
            let store = Store::open_read_only(&cli.catalog)?;
            let base = Checkpoint::open(&file.base_path)?;
            let c = estimate_total(&file.plan, base.header(), store.catalog(), None)?;
            print_json(&json!({
                "c_base": c.c_base,
                "c_expert": c.c_expert,
                "c_out": c.c_out,
                "c_meta": c.c_meta,
                "total": c.total(),
                "budget_b": file.plan.budget_b,
                "feasible": c.c_expert <= file.plan.budget_b,
            }))?;
        }
        Command::Bench(cmd) => run_bench(&cli.catalog, s, cli.seed, cli.metrics_out.as_deref(), cmd)?,
    }
    Ok(Status::Ok)
}

fn finish_merge(
    store: &Store,
    manifest: &mergepipe::catalog::ManifestRecord,
    reused: bool,
    report: RunReport,
    metrics_out: Option<&Path>,
) -> anyhow::Result<()> {
    if let Some(p) = metrics_out {
        write_reports(p, std::slice::from_ref(&report))?;
    }
    print_json(&json!({
        "sid": manifest.sid,
        "path": store.model_path(&manifest.sid),
        "output_model_id": manifest.output_model_id,
        "reused": reused,
        "budget_b": manifest.budget_b,
        "realized_expert_cost": manifest.realized_expert_cost,
        "metrics": report,
    }))
}

fn run_bench(root: &Path, s: u64, seed: u64, metrics_out: Option<&Path>, cmd: BenchCommand) -> anyhow::Result<()> {
    let rows: Vec<BenchRun> = match cmd {
        BenchCommand::Scaling { common, ks, budget } => {
            let w = Workload::load(&common.workload)?;
            if let Some(&k) = ks.iter().find(|&&k| k > w.experts.len()) {
                bail!("workload has {} experts, K = {k} requested", w.experts.len());
            }
            let mut store = Store::open(root)?;
            let opts = common.exec.options()?;
            bench::bench_scaling(&mut store, &w, &ks, common.op.spec(seed)?, budget, s, &opts)?
        }
        BenchCommand::Budget { common, fractions } => {
            let w = Workload::load(&common.workload)?;
            let inputs = Inputs::open(&w.base, &w.experts)?;
            let mut store = Store::open(root)?;
            let opts = common.exec.options()?;
            bench::bench_budget(&mut store, &inputs, &fractions, common.op.spec(seed)?, s, &opts)?
        }
        BenchCommand::BlockSize { common, sizes, budget } => {
            let w = Workload::load(&common.workload)?;
            let inputs = Inputs::open(&w.base, &w.experts)?;
            let mut store = Store::open(root)?;
            let opts = common.exec.options()?;
            bench::bench_block_size(&mut store, &inputs, &sizes, common.op.spec(seed)?, budget, &opts)?
        }
        BenchCommand::Stability { common, runs, budget } => {
            let w = Workload::load(&common.workload)?;
            let inputs = Inputs::open(&w.base, &w.experts)?;
            let opts = common.exec.options()?;
            bench::bench_stability(
                &root.join("stability"),
                &inputs,
                runs,
                common.op.spec(seed)?,
                budget,
                s,
                &opts,
            )?
        }
    };
    let reports: Vec<RunReport> = rows.iter().map(|r| r.report.clone()).collect();
    emit_reports(metrics_out, &reports)?;
    if metrics_out.is_some() {
        for r in &rows {
            eprintln!(
                "{:>9} K={:<3} S={:<7} budget={:<12} expert_read={:<12} touched={:.4} plan={:.1}ms merge={:.1}ms sid={}",
                format!("{:?}", r.report.mode).to_lowercase(),
                r.report.k,
                r.report.block_size,
                r.report.budget,
                r.report.expert_read,
                r.touched_fraction,
                r.plan_ms,
                r.merge_ms,
                r.manifest.sid
            );
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_io_or_corruption() => 3,
        Some(_) => 1,
        None if err.downcast_ref::<std::io::Error>().is_some() => 3,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::VerificationFailed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
