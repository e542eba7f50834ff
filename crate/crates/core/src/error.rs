use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt checkpoint {}: {reason}", path.display())]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("duplicate tensor name `{0}`")]
    DuplicateTensor(String),

    #[error("tensor `{name}` has {actual} elements but shape {shape:?} requires {expected}")]
    ShapeDataMismatch {
        name: String,
        shape: Vec<u64>,
        expected: u64,
        actual: u64,
    },

    #[error("unknown tensor `{0}`")]
    UnknownTensor(String),

    #[error("block index {block_idx} out of range for tensor `{tensor}` ({blocks} blocks)")]
    BlockOutOfRange {
        tensor: String,
        block_idx: u64,
        blocks: u64,
    },

    #[error("block size must be at least one element")]
    ZeroBlockSize,

    #[error("tensor `{0}` missing from one of the checkpoints")]
    MissingTensor(String),

    #[error("shape mismatch for tensor `{tensor}`: {detail}")]
    ShapeMismatch { tensor: String, detail: String },

    #[error("no block metadata for {model_id}/{tensor_id}#{block_idx}")]
    MissingBlockMeta {
        model_id: String,
        tensor_id: String,
        block_idx: u64,
    },

    #[error("snapshot {sid} already exists with different content")]
    ImmutabilityViolation { sid: String },

    #[error("malformed record: {0}")]
    MalformedRecord(String),

    #[error("unknown record kind `{0}`")]
    UnknownKind(String),

    #[error("catalog at {} is locked by another writer", .0.display())]
    CatalogLocked(PathBuf),

    #[error("catalog at {} was opened read-only", .0.display())]
    ReadOnlyCatalog(PathBuf),

    #[error("non-finite float in digestable structure")]
    NonFiniteFloat,

    #[error("invalid operator parameter: {0}")]
    InvalidOperator(String),

    #[error("array length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("invalid budget `{0}`")]
    InvalidBudget(String),

    #[error("plan does not match inputs: {0}")]
    PlanMismatch(String),

    #[error("plan reads {required} expert bytes but its budget allows {allowed}")]
    BudgetExceeded { required: u64, allowed: u64 },

    #[error("staged block {tensor}#{block_idx} failed hash validation")]
    HashValidation { tensor: String, block_idx: u64 },

    #[error("unknown snapshot {0}")]
    UnknownSnapshot(String),

    #[error("snapshots are structurally different: {0}")]
    StructureMismatch(String),

    #[error("injected crash at step {step} ({label})")]
    InjectedCrash { step: u64, label: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::CorruptCheckpoint {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by damaged or unreadable on-disk state.
    pub fn is_io_or_corruption(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::CorruptCheckpoint { .. }
                | Error::HashValidation { .. }
                | Error::MalformedRecord(_)
                | Error::Json(_)
                | Error::Csv(_)
        )
    }
}

/// Extension for attaching a path to `std::io::Result`.
pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|e| Error::io(path, e))
    }
}
