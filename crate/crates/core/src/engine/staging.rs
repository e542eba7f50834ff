//! Staged output and the rename-based commit.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::canonical::{to_canonical_json, Digest};
use crate::catalog::{BlockObject, ManifestRecord};
use crate::checkpoint::{CheckpointHeader, CheckpointWriter};
use crate::error::{Error, IoContext, Result};
use crate::metrics::{Category, IoLedger};
use crate::store::{remove_any, sync_dir, LineageLine, Store, LINEAGE_FILE, MODEL_FILE};

/// Numbered execution steps; a configured step fails with
/// [`Error::InjectedCrash`] before it runs, leaving disk state as a crash would.
#[derive(Debug, Default)]
pub struct Steps {
    next: AtomicU64,
    crash_at: Option<u64>,
}

impl Steps {
    pub fn new(crash_at: Option<u64>) -> Self {
        Steps {
            next: AtomicU64::new(0),
            crash_at,
        }
    }

    pub fn step(&self, label: &str) -> Result<()> {
        let s = self.next.fetch_add(1, Ordering::SeqCst);
        if self.crash_at == Some(s) {
            return Err(Error::InjectedCrash {
                step: s,
                label: label.to_string(),
            });
        }
        Ok(())
    }

    pub fn taken(&self) -> u64 {
        self.next.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StagingState {
    Open,
    Validated,
    Published,
    Aborted,
}

/// Output checkpoint being written under `staging/`.
#[derive(Debug)]
pub struct StagingHandle {
    dir: PathBuf,
    writer: CheckpointWriter,
    block_map: BTreeMap<String, Vec<BlockObject>>,
    state: StagingState,
}

fn unique_name(tag: &str) -> String {
    static SEQ: AtomicU64 = AtomicU64::new(0);
    let nanos = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or_default();
    format!(
        "{tag}-{}-{nanos}-{}",
        std::process::id(),
        SEQ.fetch_add(1, Ordering::Relaxed)
    )
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or_default()
}

impl StagingHandle {
    pub fn create_dir(store: &Store, tag: &str) -> Result<PathBuf> {
        let dir = store.staging_dir().join(unique_name(tag));
        fs::create_dir_all(&dir).at(&dir)?;
        Ok(dir)
    }

    /// Preallocate the output file inside `dir`.
    pub fn open(dir: PathBuf, header: CheckpointHeader) -> Result<Self> {
        let writer = CheckpointWriter::create(&dir.join(MODEL_FILE), header)?;
        Ok(StagingHandle {
            dir,
            writer,
            block_map: BTreeMap::new(),
            state: StagingState::Open,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn writer(&self) -> &CheckpointWriter {
        &self.writer
    }

    pub fn state(&self) -> StagingState {
        self.state
    }

    pub fn block_map(&self) -> &BTreeMap<String, Vec<BlockObject>> {
        &self.block_map
    }

    pub fn record_tensor(&mut self, tensor_id: String, blocks: Vec<BlockObject>) {
        self.block_map.insert(tensor_id, blocks);
    }

    pub fn sync(&self) -> Result<()> {
        self.writer.sync()
    }

    /// Re-read every staged block and compare with the hash recorded at
    /// write time. Reads are charged as metadata I/O.
    pub fn validate(&mut self, ledger: &IoLedger) -> Result<()> {
        for (tensor, blocks) in &self.block_map {
            for b in blocks {
                let bytes = self.writer.read_at(b.offset, b.length)?;
                ledger.charge(Category::Meta, b.length);
                if Digest::of_bytes(&bytes) != b.hash {
                    return Err(Error::HashValidation {
                        tensor: tensor.clone(),
                        block_idx: b.block_idx,
                    });
                }
            }
        }
        self.state = StagingState::Validated;
        Ok(())
    }

    pub fn abort(&mut self) {
        if self.state != StagingState::Published {
            let _ = remove_any(&self.dir);
            self.state = StagingState::Aborted;
        }
    }
}

/// Move a validated staging area to `snapshots/<sid>/` and commit it by
/// renaming its manifest into place, then record it in the catalog.
///
/// Returns the manifest that is visible afterwards, which is the existing
/// one when the sid was already published.
pub fn atomic_publish(
    store: &mut Store,
    staging: &mut StagingHandle,
    manifest: &ManifestRecord,
    lineage: &[LineageLine],
    steps: &Steps,
    ledger: &IoLedger,
) -> Result<ManifestRecord> {
    if staging.state != StagingState::Validated {
        return Err(Error::PlanMismatch(
            "publishing a staging area that was not validated".into(),
        ));
    }
    if manifest.compute_sid()? != manifest.sid {
        return Err(Error::ImmutabilityViolation {
            sid: manifest.sid.to_string(),
        });
    }
    let sid = manifest.sid;
    if store.is_visible(&sid) {
        let existing = store.load_manifest(&sid)?;
        staging.abort();
        let put = store.catalog_mut().put(&existing)?;
        ledger.charge(Category::Meta, put.bytes);
        return Ok(existing);
    }

    steps.step("write lineage")?;
    let lineage_path = staging.dir.join(LINEAGE_FILE);
    let mut text = String::new();
    for l in lineage {
        text.push_str(&to_canonical_json(l)?);
        text.push('\n');
    }
    write_synced(&lineage_path, text.as_bytes())?;
    ledger.charge(Category::Meta, text.len() as u64);

    steps.step("write manifest")?;
    let manifest_path = store.manifest_path(&sid);
    let tmp = manifest_path.with_extension("json.tmp");
    let body = to_canonical_json(manifest)?;
    write_synced(&tmp, body.as_bytes())?;
    ledger.charge(Category::Meta, body.len() as u64);

    steps.step("move snapshot")?;
    let snap_dir = store.snapshot_dir(&sid);
    if snap_dir.exists() {
        // Left by an earlier crash between move and commit.
        remove_any(&snap_dir)?;
    }
    fs::rename(&staging.dir, &snap_dir).at(&snap_dir)?;
    sync_dir(&store.snapshots_dir())?;

    steps.step("commit")?;
    fs::rename(&tmp, &manifest_path).at(&manifest_path)?;
    sync_dir(&store.snapshots_dir())?;
    staging.state = StagingState::Published;
    staging.dir = snap_dir;

    steps.step("catalog append")?;
    let catalog = store.catalog_mut();
    for l in lineage {
        ledger.charge(Category::Meta, catalog.put_value(l.kind, &l.record)?.bytes);
    }
    ledger.charge(Category::Meta, catalog.put(manifest)?.bytes);
    catalog.flush()?;
    Ok(manifest.clone())
}

fn write_synced(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).at(path)?;
    f.write_all(bytes).at(path)?;
    f.sync_all().at(path)
}
