//! Pulls the selected expert blocks for one output block.

use crate::error::Result;
use crate::metrics::{Category, IoLedger};
use crate::operators::DeltaBatch;
use crate::planner::ExpertInput;

/// Reads expert blocks iff the plan selected them, charging each read to
/// the expert category. Full-weight experts are turned into deltas against
/// the base block; delta experts are returned as stored.
pub struct DeltaIterator<'a> {
    experts: &'a [ExpertInput],
    ledger: &'a IoLedger,
    block_size: u64,
}

/// Per-tensor position of the tensor inside each expert file.
#[derive(Debug, Clone)]
pub struct TensorCursor {
    pub tensor_id: String,
    pub expert_tensor_idx: Vec<usize>,
}

impl<'a> DeltaIterator<'a> {
    pub fn new(experts: &'a [ExpertInput], ledger: &'a IoLedger, block_size: u64) -> Self {
        DeltaIterator {
            experts,
            ledger,
            block_size,
        }
    }

    pub fn cursor(&self, tensor_id: &str) -> Result<TensorCursor> {
        Ok(TensorCursor {
            tensor_id: tensor_id.to_string(),
            expert_tensor_idx: self
                .experts
                .iter()
                .map(|e| e.checkpoint.tensor_index(tensor_id))
                .collect::<Result<_>>()?,
        })
    }

    /// Build the batch for block `block_idx`, reading only `selected` experts.
    pub fn pull(
        &self,
        cursor: &TensorCursor,
        block_idx: u64,
        first_element: u64,
        base_values: Vec<f32>,
        selected: &[u32],
    ) -> Result<DeltaBatch> {
        let mut deltas = Vec::with_capacity(selected.len());
        for &i in selected {
            let e = &self.experts[i as usize];
            let block = e
                .checkpoint
                .read_block_at(cursor.expert_tensor_idx[i as usize], block_idx, self.block_size)?;
            self.ledger.charge(Category::Expert, block.raw_bytes);
            deltas.push((i, to_delta(block.values, &base_values, e.is_delta)));
        }
        Ok(DeltaBatch {
            tensor_id: cursor.tensor_id.clone(),
            block_idx,
            first_element,
            base_values,
            deltas,
        })
    }
}

/// `expert - base` in f32, or the stored values for a delta expert.
pub fn to_delta(mut values: Vec<f32>, base: &[f32], is_delta: bool) -> Vec<f32> {
    if !is_delta {
        for (v, b) in values.iter_mut().zip(base) {
            *v -= *b;
        }
    }
    values
}
