//! Logical-byte I/O accounting per cost category.

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Base,
    Expert,
    Out,
    Meta,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Base, Category::Expert, Category::Out, Category::Meta];

    fn index(self) -> usize {
        match self {
            Category::Base => 0,
            Category::Expert => 1,
            Category::Out => 2,
            Category::Meta => 3,
        }
    }
}

/// Shared, lock-free byte counters.
#[derive(Debug, Default)]
pub struct IoLedger {
    bytes: [AtomicU64; 4],
    ops: [AtomicU64; 4],
    wall_ms: AtomicU64,
}

impl IoLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn charge(&self, category: Category, bytes: u64) {
        if bytes == 0 {
            return;
        }
        let i = category.index();
        self.bytes[i].fetch_add(bytes, Ordering::Relaxed);
        self.ops[i].fetch_add(1, Ordering::Relaxed);
    }

    pub fn bytes(&self, category: Category) -> u64 {
        self.bytes[category.index()].load(Ordering::Relaxed)
    }

    /// Number of charged operations (block or tensor reads/writes) per category.
    pub fn ops(&self, category: Category) -> u64 {
        self.ops[category.index()].load(Ordering::Relaxed)
    }

    pub fn base_read(&self) -> u64 {
        self.bytes(Category::Base)
    }

    pub fn expert_read(&self) -> u64 {
        self.bytes(Category::Expert)
    }

    pub fn output_write(&self) -> u64 {
        self.bytes(Category::Out)
    }

    pub fn meta_io(&self) -> u64 {
        self.bytes(Category::Meta)
    }

    pub fn total(&self) -> u64 {
        Category::ALL.iter().map(|c| self.bytes(*c)).sum()
    }

    pub fn set_wall_ms(&self, ms: u64) {
        self.wall_ms.store(ms, Ordering::Relaxed);
    }

    pub fn wall_ms(&self) -> u64 {
        self.wall_ms.load(Ordering::Relaxed)
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        LedgerSnapshot {
            base_read: self.base_read(),
            expert_read: self.expert_read(),
            output_write: self.output_write(),
            meta_io: self.meta_io(),
            wall_ms: self.wall_ms(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub base_read: u64,
    pub expert_read: u64,
    pub output_write: u64,
    pub meta_io: u64,
    pub wall_ms: u64,
}

impl LedgerSnapshot {
    pub fn total(&self) -> u64 {
        self.base_read + self.expert_read + self.output_write + self.meta_io
    }
}

/// Which pipeline produced a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Naive,
    Mergepipe,
}

/// One exported row; this is also the bench CSV schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: RunMode,
    #[serde(rename = "K")]
    pub k: usize,
    pub op: String,
    pub block_size: u64,
    pub budget: u64,
    pub base_read: u64,
    pub expert_read: u64,
    pub output_write: u64,
    pub meta_io: u64,
    pub wall_ms: u64,
    pub sid: String,
}

/// Context of a finished run, combined with ledger counters by [`export`].
#[derive(Debug, Clone)]
pub struct RunContext {
    pub mode: RunMode,
    pub k: usize,
    pub op: String,
    pub block_size: u64,
    pub budget: u64,
    pub sid: String,
}

pub fn export(ledger: &IoLedger, ctx: &RunContext) -> RunReport {
    let s = ledger.snapshot();
    RunReport {
        mode: ctx.mode,
        k: ctx.k,
        op: ctx.op.clone(),
        block_size: ctx.block_size,
        budget: ctx.budget,
        base_read: s.base_read,
        expert_read: s.expert_read,
        output_write: s.output_write,
        meta_io: s.meta_io,
        wall_ms: s.wall_ms,
        sid: ctx.sid.clone(),
    }
}

/// Write rows as CSV, or as a JSON array when the path ends in `.json`.
pub fn write_reports(path: &Path, rows: &[RunReport]) -> Result<()> {
    if path.extension().is_some_and(|e| e == "json") {
        let text = serde_json::to_string_pretty(rows)?;
        let mut f = std::fs::File::create(path).at(path)?;
        f.write_all(text.as_bytes()).at(path)?;
        f.write_all(b"\n").at(path)?;
        return Ok(());
    }
    let f = std::fs::File::create(path).at(path)?;
    write_csv(f, rows)
}

/// Write rows as CSV with a header line.
pub fn write_csv<W: Write>(out: W, rows: &[RunReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

pub fn read_reports(path: &Path) -> Result<Vec<RunReport>> {
    if path.extension().is_some_and(|e| e == "json") {
        let text = std::fs::read_to_string(path).at(path)?;
        return Ok(serde_json::from_str(&text)?);
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
