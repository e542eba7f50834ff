//! Budgeted, block-level model merging over content-addressed checkpoints.

pub mod analyzer;
pub mod bench;
pub mod canonical;
pub mod catalog;
pub mod checkpoint;
pub mod cost;
pub mod engine;
pub mod error;
pub mod inspect;
pub mod metrics;
pub mod operators;
pub mod planner;
pub mod store;
pub mod workload;

pub use canonical::Digest;
pub use catalog::{Catalog, SnapshotId};
pub use checkpoint::{Checkpoint, CheckpointHeader, DType};
pub use error::{Error, Result};
pub use metrics::IoLedger;
pub use operators::{OperatorKind, OperatorSpec};
pub use planner::{Budget, ExpertInput, MergePlan};
pub use store::Store;
