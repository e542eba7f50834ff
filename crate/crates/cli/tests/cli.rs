use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mergepipe::metrics::read_reports;
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_mergepipe");

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        Env {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn cmd(&self, args: &[&str]) -> Command {
        let mut c = Command::new(BIN);
        c.current_dir(self.dir.path())
            .env_remove("MERGEPIPE_CRASH_AT_STEP")
            .args(["--catalog", "store", "--block-size", "2048"])
            .args(args);
        c
    }

    fn run(&self, args: &[&str]) -> Output {
        self.cmd(args).output().unwrap()
    }

    fn ok_json(&self, args: &[&str]) -> Value {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        serde_json::from_slice(&out.stdout).unwrap()
    }

    /// Generate a 3-expert workload and analyze it.
    fn workload(&self) -> String {
        self.ok_json(&["--seed", "9", "gen", "--out", "w", "--elements", "60000", "-k", "3"]);
        self.ok_json(&["analyze", "w/base.mpck"]);
        for i in 0..3 {
            self.ok_json(&["analyze", &format!("w/expert_{i:02}.mpck"), "--base", "w/base.mpck"]);
        }
        "w/expert_00.mpck,w/expert_01.mpck,w/expert_02.mpck".into()
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn sid(v: &Value) -> String {
    v["sid"].as_str().unwrap().to_string()
}

#[test]
fn help_exits_zero_and_bad_usage_exits_one() {
    let env = Env::new();
    for sub in [
        &["--help"][..],
        &["--version"],
        &["gen", "--help"],
        &["analyze", "--help"],
        &["plan", "--help"],
        &["merge", "--help"],
        &["naive", "--help"],
        &["inspect", "--help"],
        &["verify", "--help"],
        &["diff", "--help"],
        &["cost", "--help"],
        &["bench", "--help"],
        &["bench", "scaling", "--help"],
        &["bench", "budget", "--help"],
        &["bench", "block-size", "--help"],
        &["bench", "stability", "--help"],
    ] {
        assert_eq!(code(&env.run(sub)), 0, "{sub:?}");
    }
    assert_eq!(code(&env.run(&["frobnicate"])), 1);
    assert_eq!(code(&env.run(&["plan", "--base", "x.mpck"])), 1);
    assert_eq!(
        code(&env.run(&["plan", "--base", "b", "--experts", "e", "--budget", "lots"])),
        1
    );
}

#[test]
fn plan_merge_verify_round_trip() {
    let env = Env::new();
    let experts = env.workload();
    let summary = env.ok_json(&[
        "plan",
        "--base",
        "w/base.mpck",
        "--experts",
        &experts,
        "--op",
        "ties",
        "--budget",
        "0.25",
        "--out",
        "plan.json",
    ]);
    let budget = summary["budget_b"].as_u64().unwrap();
    assert_eq!(budget, 180_000);
    assert!(summary["estimated_expert_cost"].as_u64().unwrap() <= budget);
    assert_eq!(summary["fallback_used"], Value::Bool(false));

    let cost = env.ok_json(&["cost", "plan.json"]);
    assert_eq!(cost["c_expert"], summary["estimated_expert_cost"]);
    assert_eq!(cost["c_base"].as_u64(), Some(240_000));
    assert_eq!(cost["feasible"], Value::Bool(true));

    let merged = env.ok_json(&["merge", "--plan", "plan.json", "--metrics-out", "run.csv"]);
    assert_eq!(merged["realized_expert_cost"], summary["estimated_expert_cost"]);
    let rows = read_reports(&env.path("run.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].sid, sid(&merged));
    assert!(rows[0].expert_read <= rows[0].budget);

    let s = sid(&merged);
    let report = env.ok_json(&["verify", &s[..12]]);
    assert_eq!(report["ok"], Value::Bool(true));
    let inspected = env.ok_json(&["inspect", &s]);
    assert_eq!(inspected["manifest"]["sid"].as_str(), Some(s.as_str()));

    let again = env.ok_json(&["merge", "--plan", "plan.json"]);
    assert_eq!(sid(&again), s);
}

#[test]
fn full_budget_plan_equals_naive_through_the_cli() {
    let env = Env::new();
    let experts = env.workload();
    let args = [
        "--base",
        "w/base.mpck",
        "--experts",
        &experts,
        "--op",
        "dare",
        "--drop-p",
        "0.5",
    ];
    let naive = env.ok_json(&[&["--seed", "4", "naive"][..], &args].concat());
    env.ok_json(
        &[
            &["--seed", "4", "plan"][..],
            &args,
            &["--budget", "1.0", "--out", "full.json"],
        ]
        .concat(),
    );
    let full = env.ok_json(&["merge", "--plan", "full.json"]);
    assert_ne!(sid(&naive), sid(&full));
    let a = std::fs::read(naive["path"].as_str().map(|p| env.path(p)).unwrap()).unwrap();
    let b = std::fs::read(full["path"].as_str().map(|p| env.path(p)).unwrap()).unwrap();
    assert_eq!(a, b);
    let d = env.ok_json(&["diff", &sid(&full), &sid(&naive)]);
    assert_eq!(d["rel_l2"].as_f64(), Some(0.0));
    assert_eq!(d["p95_block_err"].as_f64(), Some(0.0));
}

#[test]
fn tampered_snapshot_fails_verification_with_code_two() {
    let env = Env::new();
    let experts = env.workload();
    let out = env.ok_json(&["naive", "--base", "w/base.mpck", "--experts", &experts, "--op", "avg"]);
    let s = sid(&out);
    let model = env.path(out["path"].as_str().unwrap());
    let mut bytes = std::fs::read(&model).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    std::fs::write(&model, bytes).unwrap();
    let o = env.run(&["verify", &s]);
    assert_eq!(code(&o), 2);
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["ok"], Value::Bool(false));
}

#[test]
fn unreadable_inputs_exit_three() {
    let env = Env::new();
    std::fs::write(env.path("junk.mpck"), b"not a checkpoint at all").unwrap();
    assert_eq!(code(&env.run(&["analyze", "junk.mpck"])), 3);
    assert_eq!(code(&env.run(&["cost", "missing.json"])), 3);
}

#[test]
fn generation_is_deterministic() {
    let env = Env::new();
    for dir in ["a", "b"] {
        env.ok_json(&["--seed", "5", "gen", "--out", dir, "--elements", "10000", "-k", "2"]);
    }
    for f in ["base.mpck", "expert_00.mpck", "expert_01.mpck"] {
        assert_eq!(
            std::fs::read(env.path("a").join(f)).unwrap(),
            std::fs::read(env.path("b").join(f)).unwrap()
        );
    }
    env.ok_json(&[
        "gen",
        "--out",
        "z",
        "--elements",
        "10000",
        "-k",
        "1",
        "--divergence",
        "0",
    ]);
    let payload = |p: &Path| {
        let ck = mergepipe::Checkpoint::open(p).unwrap();
        std::fs::read(p).unwrap()[ck.header_bytes() as usize..].to_vec()
    };
    assert_eq!(
        payload(&env.path("z/base.mpck")),
        payload(&env.path("z/expert_00.mpck"))
    );
}

#[test]
fn injected_crash_then_rerun() {
    let env = Env::new();
    let experts = env.workload();
    env.ok_json(&[
        "plan",
        "--base",
        "w/base.mpck",
        "--experts",
        &experts,
        "--budget",
        "0.5",
        "--out",
        "p.json",
    ]);
    for step in [0, 5, 14] {
        let o = env
            .cmd(&["merge", "--plan", "p.json"])
            .env("MERGEPIPE_CRASH_AT_STEP", step.to_string())
            .output()
            .unwrap();
        assert_ne!(code(&o), 0, "step {step}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("injected crash"));
    }
    let out = env.ok_json(&["merge", "--plan", "p.json"]);
    assert_eq!(env.ok_json(&["verify", &sid(&out)])["ok"], Value::Bool(true));
    let staging: Vec<_> = std::fs::read_dir(env.path("store/staging")).unwrap().collect();
    assert!(staging.is_empty());
}

#[test]
fn bench_budget_writes_parseable_rows() {
    let env = Env::new();
    env.ok_json(&["gen", "--out", "w", "--elements", "40000", "-k", "4"]);
    let o = env.run(&[
        "bench",
        "budget",
        "--workload",
        "w",
        "--fractions",
        "0.2,0.5,1.0",
        "--metrics-out",
        "b.csv",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_reports(&env.path("b.csv")).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.windows(2).all(|w| w[0].expert_read <= w[1].expert_read));
    assert!(rows.iter().all(|r| r.expert_read <= r.budget && r.k == 4));

    let o = env.run(&[
        "bench",
        "scaling",
        "--workload",
        "w",
        "--ks",
        "2,4",
        "--budget",
        "50KiB",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.starts_with("mode,K,op,block_size,budget,base_read,expert_read,output_write,meta_io,wall_ms,sid"));
}
