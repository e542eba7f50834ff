//! On-disk store: catalog, committed snapshots and staging areas.
//!
//! ```text
//! <root>/catalog/<kind>.jsonl
//! <root>/snapshots/<sid>/model.mpck
//! <root>/snapshots/<sid>/lineage.jsonl
//! <root>/snapshots/<sid>.manifest.json     (its presence is the commit)
//! <root>/staging/<name>/...
//! ```

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::catalog::{Catalog, ManifestRecord, RecordKind, SnapshotId};
use crate::error::{Error, IoContext, Result};

pub const MANIFEST_SUFFIX: &str = ".manifest.json";
pub const MODEL_FILE: &str = "model.mpck";
pub const LINEAGE_FILE: &str = "lineage.jsonl";

/// One line of a snapshot's lineage file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LineageLine {
    pub kind: RecordKind,
    pub record: Value,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RecoveryReport {
    /// Visible snapshots whose catalog records were re-appended.
    pub rolled_forward: Vec<SnapshotId>,
    pub removed_staging: usize,
    pub removed_orphans: usize,
}

#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    catalog: Catalog,
}

impl Store {
    /// Open for writing and run crash recovery.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        for d in ["snapshots", "staging"] {
            fs::create_dir_all(root.join(d)).at(root.join(d))?;
        }
        let catalog = Catalog::open(root.join("catalog"))?;
        let mut store = Store { root, catalog };
        store.recover()?;
        Ok(store)
    }

    /// Open without the writer lock and without recovery.
    pub fn open_read_only(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let catalog = Catalog::open_read_only(root.join("catalog"))?;
        Ok(Store { root, catalog })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn catalog_mut(&mut self) -> &mut Catalog {
        &mut self.catalog
    }

    pub fn snapshots_dir(&self) -> PathBuf {
        self.root.join("snapshots")
    }

    pub fn staging_dir(&self) -> PathBuf {
        self.root.join("staging")
    }

    pub fn snapshot_dir(&self, sid: &SnapshotId) -> PathBuf {
        self.snapshots_dir().join(sid.to_string())
    }

    pub fn model_path(&self, sid: &SnapshotId) -> PathBuf {
        self.snapshot_dir(sid).join(MODEL_FILE)
    }

    pub fn manifest_path(&self, sid: &SnapshotId) -> PathBuf {
        self.snapshots_dir().join(format!("{sid}{MANIFEST_SUFFIX}"))
    }

    pub fn is_visible(&self, sid: &SnapshotId) -> bool {
        self.manifest_path(sid).is_file()
    }

    /// Committed snapshots, sorted by sid.
    pub fn list_snapshots(&self) -> Result<Vec<SnapshotId>> {
        let dir = self.snapshots_dir();
        let mut out = Vec::new();
        if !dir.exists() {
            return Ok(out);
        }
        for entry in fs::read_dir(&dir).at(&dir)? {
            let name = entry.at(&dir)?.file_name();
            let Some(name) = name.to_str() else { continue };
            if let Some(stem) = name.strip_suffix(MANIFEST_SUFFIX) {
                if let Ok(sid) = stem.parse() {
                    out.push(sid);
                }
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn load_manifest(&self, sid: &SnapshotId) -> Result<ManifestRecord> {
        let path = self.manifest_path(sid);
        if !path.is_file() {
            return Err(Error::UnknownSnapshot(sid.to_string()));
        }
        let text = fs::read_to_string(&path).at(&path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Resolve a full sid or a unique hex prefix of one.
    pub fn resolve(&self, sid_or_prefix: &str) -> Result<SnapshotId> {
        let matches: Vec<SnapshotId> = self
            .list_snapshots()?
            .into_iter()
            .filter(|s| s.to_string().starts_with(sid_or_prefix))
            .collect();
        match matches.as_slice() {
            [one] => Ok(*one),
            _ => Err(Error::UnknownSnapshot(sid_or_prefix.to_string())),
        }
    }

    /// Re-append catalog records for visible snapshots the catalog lacks, then
    /// delete staging areas, temporary manifests and uncommitted snapshot dirs.
    pub fn recover(&mut self) -> Result<RecoveryReport> {
        let mut report = RecoveryReport::default();
        for sid in self.list_snapshots()? {
            let key = [sid.to_string().into()];
            if self.catalog.raw_line(RecordKind::Manifest, &key).is_some() {
                continue;
            }
            let manifest = self.load_manifest(&sid)?;
            self.roll_forward(&manifest)?;
            report.rolled_forward.push(sid);
        }
        self.catalog.flush()?;

        let staging = self.staging_dir();
        for entry in fs::read_dir(&staging).at(&staging)? {
            let path = entry.at(&staging)?.path();
            remove_any(&path)?;
            report.removed_staging += 1;
        }

        let snaps = self.snapshots_dir();
        for entry in fs::read_dir(&snaps).at(&snaps)? {
            let path = entry.at(&snaps)?.path();
            let name = path
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default()
                .to_string();
            let orphan = if path.is_dir() {
                !snaps.join(format!("{name}{MANIFEST_SUFFIX}")).is_file()
            } else {
                !name.ends_with(MANIFEST_SUFFIX)
            };
            if orphan {
                remove_any(&path)?;
                report.removed_orphans += 1;
            }
        }
        Ok(report)
    }

    fn roll_forward(&mut self, manifest: &ManifestRecord) -> Result<()> {
        let lineage = self.snapshot_dir(&manifest.sid).join(LINEAGE_FILE);
        if lineage.is_file() {
            let f = fs::File::open(&lineage).at(&lineage)?;
            for line in BufReader::new(f).lines() {
                let line = line.at(&lineage)?;
                if line.is_empty() {
                    continue;
                }
                let l: LineageLine = serde_json::from_str(&line)?;
                self.catalog.put_value(l.kind, &l.record)?;
            }
        }
        self.catalog.put(manifest)?;
        Ok(())
    }
}

pub(crate) fn remove_any(path: &Path) -> Result<()> {
    if path.is_dir() {
        fs::remove_dir_all(path).at(path)
    } else {
        fs::remove_file(path).at(path)
    }
}

/// fsync a directory so renames inside it are durable.
pub(crate) fn sync_dir(path: &Path) -> Result<()> {
    fs::File::open(path).and_then(|f| f.sync_all()).at(path)
}
