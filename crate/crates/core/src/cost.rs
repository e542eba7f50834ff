//! Merge cost decomposition in logical payload bytes.

use serde::{Deserialize, Serialize};

use crate::catalog::{BlockMetaRecord, Catalog, KeyPart};
use crate::checkpoint::{block_bytes, CheckpointHeader};
use crate::error::{Error, Result};
use crate::planner::MergePlan;

/// Fixed part of the default metadata estimate.
pub const META_FIXED_BYTES: u64 = 64 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub c_base: u64,
    pub c_expert: u64,
    pub c_out: u64,
    pub c_meta: u64,
}

impl CostBreakdown {
    pub fn total(&self) -> u64 {
        self.c_base + self.c_expert + self.c_out + self.c_meta
    }
}

/// Every expert tensor read once.
pub fn naive_expert_cost<'a>(experts: impl IntoIterator<Item = &'a CheckpointHeader>) -> u64 {
    experts.into_iter().map(CheckpointHeader::payload_bytes).sum()
}

/// Sum of catalog block sizes over the plan's selection.
pub fn planned_expert_cost(plan: &MergePlan, catalog: &Catalog) -> Result<u64> {
    let mut total = 0;
    for (expert, sel) in plan.expert_ids.iter().zip(&plan.selected) {
        for (tensor, ranges) in sel {
            let prefix = [KeyPart::from(expert.as_str()), KeyPart::from(tensor.as_str())];
            let records: Vec<BlockMetaRecord> = catalog.get(&prefix)?;
            for r in ranges {
                for b in r.start..r.end {
                    let rec = records
                        .iter()
                        .find(|m| m.key.block_idx == b && m.layout == plan.block_size)
                        .ok_or_else(|| Error::MissingBlockMeta {
                            model_id: expert.clone(),
                            tensor_id: tensor.clone(),
                            block_idx: b,
                        })?;
                    total += rec.bytes;
                }
            }
        }
    }
    Ok(total)
}

/// Same sum, computed from the checkpoint layout instead of the catalog.
pub fn selection_cost(plan: &MergePlan, base: &CheckpointHeader) -> Result<u64> {
    let mut total = 0;
    for sel in &plan.selected {
        for (tensor, ranges) in sel {
            let meta = base
                .tensor_index(tensor)
                .map(|i| &base.tensors[i])
                .ok_or_else(|| Error::MissingTensor(tensor.clone()))?;
            for r in ranges {
                for b in r.start..r.end {
                    total += block_bytes(meta, plan.block_size, b)?;
                }
            }
        }
    }
    Ok(total)
}

pub fn default_meta_estimate(c_base: u64) -> u64 {
    c_base / 100 + META_FIXED_BYTES
}

pub fn estimate_total(
    plan: &MergePlan,
    base: &CheckpointHeader,
    catalog: &Catalog,
    meta_estimate: Option<u64>,
) -> Result<CostBreakdown> {
    let c_base = base.payload_bytes();
    let c_expert = if plan.fallback_used {
        // Fallback plans select whole tensors and may lack block records.
        selection_cost(plan, base)?
    } else {
        planned_expert_cost(plan, catalog)?
    };
    Ok(CostBreakdown {
        c_base,
        c_expert,
        c_out: c_base,
        c_meta: meta_estimate.unwrap_or_else(|| default_meta_estimate(c_base)),
    })
}

pub fn is_feasible(plan: &MergePlan, catalog: &Catalog) -> Result<bool> {
    Ok(planned_expert_cost(plan, catalog)? <= plan.budget_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::DType;

    fn header(id: &str, elems: &[u64]) -> CheckpointHeader {
        let shapes: Vec<Vec<u64>> = elems.iter().map(|n| vec![*n]).collect();
        let names: Vec<String> = (0..elems.len()).map(|i| format!("t{i}")).collect();
        CheckpointHeader::layout(
            id,
            names
                .iter()
                .zip(&shapes)
                .map(|(n, s)| (n.as_str(), DType::F32, s.as_slice())),
        )
        .unwrap()
    }

    #[test]
    fn naive_cost_is_linear() {
        let hs = [header("a", &[25]), header("b", &[50]), header("c", &[75])];
        assert_eq!(naive_expert_cost(&hs), 600);
        assert_eq!(naive_expert_cost(&[]), 0);
        let one = header("e", &[1 << 18]);
        let twenty: Vec<CheckpointHeader> = (0..20).map(|_| one.clone()).collect();
        assert_eq!(naive_expert_cost(&twenty), 20 << 20);
        assert_eq!(naive_expert_cost(&twenty), 20 * naive_expert_cost([&one]));
    }

    #[test]
    fn meta_default() {
        assert_eq!(default_meta_estimate(1 << 20), (1 << 20) / 100 + 65536);
    }
}
