//! Persistent metadata catalog.
//!
//! Five record kinds, each stored as an append-only file of canonical JSON
//! lines under `catalog/<kind>.jsonl`. Replay is last-write-wins per primary
//! key, except for manifests, which are create-only: a committed snapshot can
//! never be rewritten with different content.
//!
//! One writer per directory, enforced with an advisory lock on `catalog/LOCK`.
//! Read-only handles take no lock and see whatever was fully flushed.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::canonical::{self, canonical_json, Digest};
use crate::checkpoint::{BlockRef, DType};
use crate::error::{Error, IoContext, Result};
use crate::operators::OperatorSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    BlockMeta,
    TouchMap,
    Coverage,
    Plan,
    Manifest,
}

impl RecordKind {
    pub const ALL: [RecordKind; 5] = [
        RecordKind::BlockMeta,
        RecordKind::TouchMap,
        RecordKind::Coverage,
        RecordKind::Plan,
        RecordKind::Manifest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RecordKind::BlockMeta => "blockmeta",
            RecordKind::TouchMap => "touchmap",
            RecordKind::Coverage => "coverage",
            RecordKind::Plan => "plan",
            RecordKind::Manifest => "manifest",
        }
    }

    /// Primary key fields, in key order.
    pub fn key_fields(self) -> &'static [&'static str] {
        match self {
            RecordKind::BlockMeta => &["model_id", "tensor_id", "block_idx"],
            RecordKind::TouchMap => &["sid", "tensor_id"],
            RecordKind::Coverage => &["sid", "tensor_id", "block_idx"],
            RecordKind::Plan => &["plan_id"],
            RecordKind::Manifest => &["sid"],
        }
    }

    fn file_name(self) -> String {
        format!("{}.jsonl", self.name())
    }
}

impl FromStr for RecordKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RecordKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownKind(s.to_string()))
    }
}

impl fmt::Display for RecordKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum KeyPart {
    Str(String),
    Int(u64),
}

impl From<&str> for KeyPart {
    fn from(s: &str) -> Self {
        KeyPart::Str(s.to_string())
    }
}

impl From<String> for KeyPart {
    fn from(s: String) -> Self {
        KeyPart::Str(s)
    }
}

impl From<u64> for KeyPart {
    fn from(v: u64) -> Self {
        KeyPart::Int(v)
    }
}

impl From<Digest> for KeyPart {
    fn from(d: Digest) -> Self {
        KeyPart::Str(d.to_hex())
    }
}

impl From<SnapshotId> for KeyPart {
    fn from(s: SnapshotId) -> Self {
        KeyPart::Str(s.0.to_hex())
    }
}

pub type RecordKey = Vec<KeyPart>;

fn key_of(kind: RecordKind, v: &Value) -> Result<RecordKey> {
    kind.key_fields()
        .iter()
        .map(|f| match v.get(f) {
            Some(Value::String(s)) => Ok(KeyPart::Str(s.clone())),
            Some(Value::Number(n)) if n.is_u64() => Ok(KeyPart::Int(n.as_u64().unwrap())),
            _ => Err(Error::MalformedRecord(format!("{kind} record lacks key field `{f}`"))),
        })
        .collect()
}

/// Content address of a committed snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SnapshotId(pub Digest);

impl fmt::Display for SnapshotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl FromStr for SnapshotId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(SnapshotId(s.parse()?))
    }
}

/// Per-block summary statistics used for ranking without reading data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sketch {
    #[serde(serialize_with = "canonical::finite")]
    pub l2_norm: f64,
    #[serde(serialize_with = "canonical::finite")]
    pub max_abs: f64,
    pub sign_pos_count: u64,
    #[serde(serialize_with = "canonical::finite_opt")]
    pub delta_l2: Option<f64>,
    pub delta_base_id: Option<String>,
}

impl Sketch {
    pub fn of_values(values: &[f32]) -> Self {
        let mut sq = 0f64;
        let mut max_abs = 0f64;
        let mut pos = 0u64;
        for &v in values {
            let v = v as f64;
            sq += v * v;
            max_abs = max_abs.max(v.abs());
            if v > 0.0 {
                pos += 1;
            }
        }
        Sketch {
            l2_norm: sq.sqrt(),
            max_abs,
            sign_pos_count: pos,
            delta_l2: None,
            delta_base_id: None,
        }
    }

    fn validate(&self, elements: u64) -> Result<()> {
        let bad = |what: &str| Err(Error::MalformedRecord(format!("sketch: {what}")));
        if self.l2_norm < 0.0 || self.max_abs < 0.0 || self.delta_l2.is_some_and(|d| d < 0.0) {
            return bad("negative norm");
        }
        // Small slack for the rounding in the two accumulations.
        if self.l2_norm > self.max_abs * (elements as f64).sqrt() * (1.0 + 1e-9) + 1e-300 {
            return bad("l2_norm exceeds max_abs * sqrt(n)");
        }
        if self.sign_pos_count > elements {
            return bad("sign_pos_count exceeds element count");
        }
        if self.delta_l2.is_some() != self.delta_base_id.is_some() {
            return bad("delta_l2 and delta_base_id must be set together");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockMetaRecord {
    #[serde(flatten)]
    pub key: BlockRef,
    pub bytes: u64,
    /// Element count of the block.
    pub shape: u64,
    pub dtype: DType,
    pub hash: Digest,
    pub sketch: Sketch,
    /// Block size (elements) used when the record was computed.
    pub layout: u64,
}

/// Half-open range of block indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockRange {
    pub start: u64,
    pub end: u64,
}

impl BlockRange {
    pub fn len(&self) -> u64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Compress sorted, deduplicated indices into ranges.
pub fn ranges_from_sorted(indices: impl IntoIterator<Item = u64>) -> Vec<BlockRange> {
    let mut out: Vec<BlockRange> = Vec::new();
    for i in indices {
        match out.last_mut() {
            Some(r) if r.end == i => r.end += 1,
            _ => out.push(BlockRange { start: i, end: i + 1 }),
        }
    }
    out
}

fn validate_ranges(ranges: &[BlockRange]) -> Result<()> {
    let mut prev_end = None;
    for r in ranges {
        if r.start >= r.end || prev_end.is_some_and(|e| r.start < e) {
            return Err(Error::MalformedRecord(
                "block ranges must be non-empty, sorted and disjoint".into(),
            ));
        }
        prev_end = Some(r.end);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TouchMapRecord {
    pub sid: SnapshotId,
    pub tensor_id: String,
    pub touched_blocks: Vec<BlockRange>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageRecord {
    pub sid: SnapshotId,
    pub tensor_id: String,
    pub block_idx: u64,
    /// Digest of the sorted model ids of the contributing experts.
    pub expert_set_digest: Digest,
    /// Plan indices of the experts read for this block.
    pub experts: Vec<u32>,
    /// Subset of `experts` whose pulled delta was not identically zero.
    pub surviving: Vec<u32>,
}

pub fn expert_set_digest(expert_ids: &[&str]) -> Digest {
    let mut ids: Vec<&str> = expert_ids.to_vec();
    ids.sort_unstable();
    canonical::canonical_digest(&ids).expect("string list is always digestable")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub plan_id: Digest,
    pub base_id: String,
    pub expert_ids: Vec<String>,
    pub op: OperatorSpec,
    pub budget_b: u64,
    pub selected_blocks_digest: Digest,
    pub estimated_expert_cost: u64,
}

impl PlanRecord {
    /// Digest of every field except `plan_id`.
    pub fn compute_id(&self) -> Result<Digest> {
        digest_without(self, &["plan_id"])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMode {
    Planned,
    Naive,
}

/// Location and hash of one output block inside the snapshot file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockObject {
    pub block_idx: u64,
    pub offset: u64,
    pub length: u64,
    pub hash: Digest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub sid: SnapshotId,
    pub plan_id: Digest,
    pub mode: MergeMode,
    pub base_id: String,
    pub expert_ids: Vec<String>,
    pub op: OperatorSpec,
    pub budget_b: u64,
    pub block_size: u64,
    pub realized_expert_cost: u64,
    pub output_model_id: String,
    pub output_root: String,
    /// Unix time in milliseconds.
    pub created_at: u64,
    pub block_map: BTreeMap<String, Vec<BlockObject>>,
}

/// Fields excluded from the snapshot id: the id itself, and the two fields
/// that vary between re-executions of the same plan.
const SID_EXCLUDED: [&str; 3] = ["sid", "created_at", "output_root"];

impl ManifestRecord {
    pub fn compute_sid(&self) -> Result<SnapshotId> {
        Ok(SnapshotId(digest_without(self, &SID_EXCLUDED)?))
    }

    pub fn block_count(&self) -> u64 {
        self.block_map.values().map(|v| v.len() as u64).sum()
    }

    fn validate(&self) -> Result<()> {
        for (tensor, blocks) in &self.block_map {
            for (i, b) in blocks.iter().enumerate() {
                if b.block_idx != i as u64 {
                    return Err(Error::MalformedRecord(format!(
                        "manifest block map for `{tensor}` is not contiguous"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn digest_without<T: Serialize>(v: &T, excluded: &[&str]) -> Result<Digest> {
    let mut value = canonical::to_value(v)?;
    if let Value::Object(map) = &mut value {
        for k in excluded {
            map.remove(*k);
        }
    }
    Ok(Digest::of_bytes(canonical_json(&value).as_bytes()))
}

pub trait Record: Serialize + DeserializeOwned {
    const KIND: RecordKind;

    fn validate(&self) -> Result<()> {
        Ok(())
    }
}

impl Record for BlockMetaRecord {
    const KIND: RecordKind = RecordKind::BlockMeta;

    fn validate(&self) -> Result<()> {
        if self.bytes != self.shape * self.dtype.size() {
            return Err(Error::MalformedRecord("blockmeta bytes != shape * dtype".into()));
        }
        if self.shape == 0 || self.layout == 0 || self.shape > self.layout {
            return Err(Error::MalformedRecord("blockmeta shape/layout out of range".into()));
        }
        self.sketch.validate(self.shape)
    }
}

impl Record for TouchMapRecord {
    const KIND: RecordKind = RecordKind::TouchMap;

    fn validate(&self) -> Result<()> {
        validate_ranges(&self.touched_blocks)
    }
}

impl Record for CoverageRecord {
    const KIND: RecordKind = RecordKind::Coverage;

    fn validate(&self) -> Result<()> {
        let sorted = |v: &[u32]| v.windows(2).all(|w| w[0] < w[1]);
        if !sorted(&self.experts) || !sorted(&self.surviving) {
            return Err(Error::MalformedRecord("coverage lists must be sorted".into()));
        }
        if !self.surviving.iter().all(|s| self.experts.contains(s)) {
            return Err(Error::MalformedRecord("surviving experts must be selected".into()));
        }
        Ok(())
    }
}

impl Record for PlanRecord {
    const KIND: RecordKind = RecordKind::Plan;

    fn validate(&self) -> Result<()> {
        if self.compute_id()? != self.plan_id {
            return Err(Error::MalformedRecord("plan_id is not the digest of the plan".into()));
        }
        if self.estimated_expert_cost > self.budget_b {
            return Err(Error::MalformedRecord("plan exceeds its budget".into()));
        }
        Ok(())
    }
}

impl Record for ManifestRecord {
    const KIND: RecordKind = RecordKind::Manifest;

    fn validate(&self) -> Result<()> {
        ManifestRecord::validate(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PutOutcome {
    /// False when an identical record was already stored.
    pub written: bool,
    pub bytes: u64,
}

#[derive(Debug, Default)]
struct Table {
    file: Option<File>,
    rows: BTreeMap<RecordKey, String>,
}

#[derive(Debug)]
pub struct Catalog {
    dir: PathBuf,
    _lock: Option<File>,
    tables: BTreeMap<RecordKind, Table>,
}

impl Catalog {
    /// Open for writing, taking the directory's writer lock.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir).at(&dir)?;
        let lock_path = dir.join("LOCK");
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .at(&lock_path)?;
        match lock.try_lock() {
            Ok(()) => {}
            Err(std::fs::TryLockError::WouldBlock) => return Err(Error::CatalogLocked(dir)),
            Err(std::fs::TryLockError::Error(e)) => return Err(Error::io(&lock_path, e)),
        }
        Self::load(dir, Some(lock))
    }

    /// Open without the writer lock; puts are rejected.
    pub fn open_read_only(dir: impl AsRef<Path>) -> Result<Self> {
        Self::load(dir.as_ref().to_path_buf(), None)
    }

    fn load(dir: PathBuf, lock: Option<File>) -> Result<Self> {
        let writable = lock.is_some();
        let mut tables = BTreeMap::new();
        for kind in RecordKind::ALL {
            let path = dir.join(kind.file_name());
            let mut table = Table::default();
            let mut text = String::new();
            match File::open(&path) {
                Ok(mut f) => {
                    f.read_to_string(&mut text).at(&path)?;
                }
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(Error::io(&path, e)),
            }
            // A crash mid-append can leave a final line without its newline;
            // that record was never acknowledged, so drop it.
            let complete = text.rfind('\n').map_or(0, |i| i + 1);
            for line in text[..complete].lines().filter(|l| !l.is_empty()) {
                let v: Value = serde_json::from_str(line)
                    .map_err(|e| Error::MalformedRecord(format!("{}: {e}", path.display())))?;
                let key = key_of(kind, &v)?;
                match kind {
                    // First write wins for create-only manifests.
                    RecordKind::Manifest => {
                        table.rows.entry(key).or_insert_with(|| line.to_string());
                    }
                    _ => {
                        table.rows.insert(key, line.to_string());
                    }
                }
            }
            if writable {
                let f = OpenOptions::new().create(true).append(true).open(&path).at(&path)?;
                if complete < text.len() {
                    f.set_len(complete as u64).at(&path)?;
                }
                table.file = Some(f);
            }
            tables.insert(kind, table);
        }
        Ok(Catalog {
            dir,
            _lock: lock,
            tables,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn is_writable(&self) -> bool {
        self._lock.is_some()
    }

    pub fn put<R: Record>(&mut self, record: &R) -> Result<PutOutcome> {
        record.validate()?;
        let value = canonical::to_value(record)?;
        self.put_value(R::KIND, &value)
    }

    /// Store an untyped record of the given kind.
    pub fn put_value(&mut self, kind: RecordKind, value: &Value) -> Result<PutOutcome> {
        let line = canonical_json(value);
        let key = key_of(kind, value)?;
        let path = self.dir.join(kind.file_name());
        let table = self.tables.get_mut(&kind).expect("all kinds loaded");
        if let Some(existing) = table.rows.get(&key) {
            if *existing == line {
                return Ok(PutOutcome {
                    written: false,
                    bytes: 0,
                });
            }
            if kind == RecordKind::Manifest {
                let sid = match &key[0] {
                    KeyPart::Str(s) => s.clone(),
                    KeyPart::Int(i) => i.to_string(),
                };
                return Err(Error::ImmutabilityViolation { sid });
            }
        }
        let file = table
            .file
            .as_mut()
            .ok_or_else(|| Error::ReadOnlyCatalog(self.dir.clone()))?;
        let mut buf = Vec::with_capacity(line.len() + 1);
        buf.extend_from_slice(line.as_bytes());
        buf.push(b'\n');
        file.write_all(&buf).at(&path)?;
        let bytes = buf.len() as u64;
        table.rows.insert(key, line);
        Ok(PutOutcome { written: true, bytes })
    }

    /// fsync every table.
    pub fn flush(&mut self) -> Result<()> {
        for (kind, t) in &self.tables {
            if let Some(f) = &t.file {
                f.sync_all().at(self.dir.join(kind.file_name()))?;
            }
        }
        Ok(())
    }

    fn rows_with_prefix<'a>(
        &'a self,
        kind: RecordKind,
        prefix: &'a [KeyPart],
    ) -> impl Iterator<Item = &'a String> + 'a {
        let table = &self.tables[&kind];
        table
            .rows
            .range(prefix.to_vec()..)
            .take_while(move |(k, _)| k.starts_with(prefix))
            .map(|(_, line)| line)
    }

    /// All records whose primary key starts with `prefix`, in key order.
    pub fn get<R: Record>(&self, prefix: &[KeyPart]) -> Result<Vec<R>> {
        self.rows_with_prefix(R::KIND, prefix)
            .map(|line| serde_json::from_str(line).map_err(Error::from))
            .collect()
    }

    pub fn get_one<R: Record>(&self, key: &[KeyPart]) -> Result<Option<R>> {
        match self.tables[&R::KIND].rows.get(key) {
            Some(line) => Ok(Some(serde_json::from_str(line)?)),
            None => Ok(None),
        }
    }

    /// Untyped lookup; `kind` is parsed from its file name stem.
    pub fn get_records(&self, kind: &str, prefix: &[KeyPart]) -> Result<Vec<Value>> {
        let kind: RecordKind = kind.parse()?;
        self.rows_with_prefix(kind, prefix)
            .map(|line| serde_json::from_str(line).map_err(Error::from))
            .collect()
    }

    /// Canonical line stored for a key, if any.
    pub fn raw_line(&self, kind: RecordKind, key: &[KeyPart]) -> Option<&str> {
        self.tables[&kind].rows.get(key).map(String::as_str)
    }

    pub fn len(&self, kind: RecordKind) -> usize {
        self.tables[&kind].rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tables.values().all(|t| t.rows.is_empty())
    }

    /// Total on-disk size of the record logs.
    pub fn disk_bytes(&self) -> Result<u64> {
        let mut total = 0;
        for kind in RecordKind::ALL {
            let p = self.dir.join(kind.file_name());
            match std::fs::metadata(&p) {
                Ok(m) => total += m.len(),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(Error::io(&p, e)),
            }
        }
        Ok(total)
    }
}
