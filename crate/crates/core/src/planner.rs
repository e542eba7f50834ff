//! Budget-aware merge planning.
//!
//! Candidates are expert blocks ranked by how far they diverge from the base
//! per element, read from catalog sketches. The greedy scan admits a
//! candidate iff it still fits in the expert-read budget and otherwise skips
//! it and keeps scanning, so every plan is feasible by construction. When any
//! expert lacks usable block metadata the planner falls back to ranking whole
//! tensors by their delta norm.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::canonical::{canonical_digest, Digest};
use crate::catalog::{ranges_from_sorted, BlockMetaRecord, BlockRange, Catalog, KeyPart, PlanRecord, RecordKind};
use crate::checkpoint::{block_bytes, block_count, Checkpoint, CheckpointHeader};
use crate::error::{Error, Result};
use crate::metrics::{Category, IoLedger};
use crate::operators::OperatorSpec;

/// Expert-read budget as given by the user.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Budget {
    Bytes(u64),
    /// Fraction of the naive expert-read cost.
    Fraction(f64),
}

impl Budget {
    pub fn resolve(self, naive_expert_cost: u64) -> u64 {
        match self {
            Budget::Bytes(b) => b,
            Budget::Fraction(f) => (f * naive_expert_cost as f64).floor() as u64,
        }
    }
}

impl FromStr for Budget {
    type Err = Error;

    /// `"512MiB"`, `"3GB"`, `"4096"` are absolute; `"0.3"`, `"1.0"`, `"0"`, `"1"` are fractions.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidBudget(s.to_string());
        let t = s.trim();
        let split = t.find(|c: char| !(c.is_ascii_digit() || c == '.')).unwrap_or(t.len());
        let (num, unit) = t.split_at(split);
        if num.is_empty() {
            return Err(bad());
        }
        let mult: u64 = match unit.trim().to_ascii_lowercase().as_str() {
            "" => {
                if num.contains('.') || num == "0" || num == "1" {
                    let f: f64 = num.parse().map_err(|_| bad())?;
                    if !f.is_finite() || f < 0.0 {
                        return Err(bad());
                    }
                    return Ok(Budget::Fraction(f));
                }
                1
            }
            "b" => 1,
            "kib" | "ki" => 1 << 10,
            "mib" | "mi" => 1 << 20,
            "gib" | "gi" => 1 << 30,
            "kb" | "k" => 1_000,
            "mb" | "m" => 1_000_000,
            "gb" | "g" => 1_000_000_000,
            _ => return Err(bad()),
        };
        let v: f64 = num.parse().map_err(|_| bad())?;
        Ok(Budget::Bytes((v * mult as f64).floor() as u64))
    }
}

/// A candidate expert block with its priority.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub expert_idx: u32,
    pub tensor_id: Arc<str>,
    pub block_idx: u64,
    pub score: f64,
    pub size: u64,
}

/// Descending score, then ascending `(expert_idx, tensor_id, block_idx)`.
pub fn candidate_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.expert_idx.cmp(&b.expert_idx))
        .then_with(|| a.tensor_id.cmp(&b.tensor_id))
        .then_with(|| a.block_idx.cmp(&b.block_idx))
}

pub fn sort_candidates(candidates: &mut [Candidate]) {
    candidates.sort_unstable_by(candidate_order);
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GreedyOutcome {
    /// Positions (in the sorted list) of admitted candidates.
    pub admitted: Vec<usize>,
    pub cost: u64,
    pub skipped: u64,
}

/// Admit each candidate, in order, iff `cost + size <= budget`.
pub fn greedy_select(sorted: &[Candidate], budget: u64) -> GreedyOutcome {
    let mut admitted = Vec::new();
    let mut cost = 0u64;
    let mut skipped = 0u64;
    for (i, c) in sorted.iter().enumerate() {
        if cost + c.size <= budget {
            cost += c.size;
            admitted.push(i);
        } else {
            skipped += 1;
        }
    }
    GreedyOutcome {
        admitted,
        cost,
        skipped,
    }
}

/// An expert checkpoint and whether it already stores deltas.
#[derive(Debug)]
pub struct ExpertInput {
    pub checkpoint: Checkpoint,
    pub is_delta: bool,
}

impl ExpertInput {
    pub fn open(path: impl Into<PathBuf>, is_delta: bool) -> Result<Self> {
        Ok(ExpertInput {
            checkpoint: Checkpoint::open(path.into())?,
            is_delta,
        })
    }

    pub fn model_id(&self) -> &str {
        self.checkpoint.model_id()
    }
}

/// Per-expert selection: tensor name to selected block ranges.
pub type Selection = BTreeMap<String, Vec<BlockRange>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergePlan {
    pub plan_id: Digest,
    pub op: OperatorSpec,
    pub base_id: String,
    pub expert_ids: Vec<String>,
    pub expert_is_delta: Vec<bool>,
    pub block_size: u64,
    /// One entry per expert, aligned with `expert_ids`.
    pub selected: Vec<Selection>,
    /// Tensor traversal order (the base header order); blocks ascend within a tensor.
    pub order: Vec<String>,
    pub budget_b: u64,
    pub estimated_expert_cost: u64,
    pub fallback_used: bool,
    pub fallback_cause: Option<String>,
    pub skipped_candidates: u64,
}

#[derive(Serialize)]
struct SelectionView<'a> {
    block_size: u64,
    expert_is_delta: &'a [bool],
    order: &'a [String],
    selected: &'a [Selection],
}

impl MergePlan {
    pub fn selected_blocks_digest(&self) -> Result<Digest> {
        canonical_digest(&SelectionView {
            block_size: self.block_size,
            expert_is_delta: &self.expert_is_delta,
            order: &self.order,
            selected: &self.selected,
        })
    }

    pub fn to_record(&self) -> Result<PlanRecord> {
        let mut rec = PlanRecord {
            plan_id: Digest::default(),
            base_id: self.base_id.clone(),
            expert_ids: self.expert_ids.clone(),
            op: self.op,
            budget_b: self.budget_b,
            selected_blocks_digest: self.selected_blocks_digest()?,
            estimated_expert_cost: self.estimated_expert_cost,
        };
        rec.plan_id = rec.compute_id()?;
        Ok(rec)
    }

    /// Recompute and store `plan_id`.
    pub fn seal(&mut self) -> Result<()> {
        self.plan_id = self.to_record()?.plan_id;
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.expert_ids.len()
    }

    /// For one tensor, the sorted expert indices selected for each block.
    pub fn experts_per_block(&self, tensor: &str, blocks: u64) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new(); blocks as usize];
        for (i, sel) in self.selected.iter().enumerate() {
            if let Some(ranges) = sel.get(tensor) {
                for r in ranges {
                    for b in r.start..r.end.min(blocks) {
                        out[b as usize].push(i as u32);
                    }
                }
            }
        }
        out
    }

    /// Selected (expert, block) pairs.
    pub fn selected_pairs(&self) -> u64 {
        self.selected
            .iter()
            .flat_map(|s| s.values())
            .flat_map(|rs| rs.iter())
            .map(BlockRange::len)
            .sum()
    }

    /// Plan with every block of every expert selected.
    pub fn full(base: &Checkpoint, experts: &[ExpertInput], op: OperatorSpec, block_size: u64) -> Result<MergePlan> {
        check_structure(base.header(), experts)?;
        let mut selected = Vec::with_capacity(experts.len());
        let mut cost = 0;
        for e in experts {
            let mut sel = Selection::new();
            for t in &e.checkpoint.header().tensors {
                let n = block_count(t, block_size)?;
                sel.insert(t.name.clone(), vec![BlockRange { start: 0, end: n }]);
                cost += t.length_bytes;
            }
            selected.push(sel);
        }
        let mut plan = MergePlan {
            plan_id: Digest::default(),
            op: op.normalized(),
            base_id: base.model_id().to_string(),
            expert_ids: experts.iter().map(|e| e.model_id().to_string()).collect(),
            expert_is_delta: experts.iter().map(|e| e.is_delta).collect(),
            block_size,
            selected,
            order: base.header().tensors.iter().map(|t| t.name.clone()).collect(),
            budget_b: cost,
            estimated_expert_cost: cost,
            fallback_used: false,
            fallback_cause: None,
            skipped_candidates: 0,
        };
        plan.seal()?;
        Ok(plan)
    }
}

/// Experts must mirror the base's tensor names, order, shapes and dtypes.
pub fn check_structure(base: &CheckpointHeader, experts: &[ExpertInput]) -> Result<()> {
    for e in experts {
        let h = e.checkpoint.header();
        for t in &base.tensors {
            let Some(i) = h.tensor_index(&t.name) else {
                return Err(Error::MissingTensor(t.name.clone()));
            };
            let et = &h.tensors[i];
            if et.shape != t.shape || et.dtype != t.dtype {
                return Err(Error::ShapeMismatch {
                    tensor: t.name.clone(),
                    detail: format!(
                        "{}: {:?}/{:?} vs base {:?}/{:?}",
                        h.model_id, et.dtype, et.shape, t.dtype, t.shape
                    ),
                });
            }
        }
        if h.tensors.len() != base.tensors.len() {
            return Err(Error::ShapeMismatch {
                tensor: "*".into(),
                detail: format!("{} has tensors the base lacks", h.model_id),
            });
        }
    }
    Ok(())
}

/// Result of ranking from catalog sketches.
#[derive(Debug)]
pub enum Scored {
    Complete(Vec<Candidate>),
    /// Block metadata unusable; the string names the first cause.
    Missing(String),
}

/// Rank every expert block by `delta_l2 / sqrt(elements)`.
///
/// Reads only catalog records; the bytes of consulted records are charged
/// to the metadata category.
pub fn score_candidates(
    base: &CheckpointHeader,
    expert_ids: &[String],
    block_size: u64,
    catalog: &Catalog,
    ledger: &IoLedger,
) -> Result<Scored> {
    let mut out = Vec::new();
    let mut consulted = 0u64;
    for (ei, eid) in expert_ids.iter().enumerate() {
        for t in &base.tensors {
            let prefix = [KeyPart::from(eid.as_str()), KeyPart::from(t.name.as_str())];
            let n = block_count(t, block_size)?;
            // Re-analysis at another block size overwrites only the keys both
            // partitions share; records left over from the other size are ignored.
            let records: Vec<BlockMetaRecord> = catalog
                .get::<BlockMetaRecord>(&prefix)?
                .into_iter()
                .filter(|r| r.layout == block_size && r.key.block_idx < n)
                .collect();
            let tensor_id: Arc<str> = Arc::from(t.name.as_str());
            if records.len() as u64 != n {
                ledger.charge(Category::Meta, consulted);
                return Ok(Scored::Missing(format!(
                    "{eid}/{}: {} block records, expected {n}",
                    t.name,
                    records.len()
                )));
            }
            for (b, r) in records.iter().enumerate() {
                let expected = block_bytes(t, block_size, b as u64)?;
                let usable = r.key.block_idx == b as u64
                    && r.layout == block_size
                    && r.bytes == expected
                    && r.sketch.delta_base_id.as_deref() == Some(base.model_id.as_str());
                let delta = match (usable, r.sketch.delta_l2) {
                    (true, Some(d)) => d,
                    _ => {
                        ledger.charge(Category::Meta, consulted);
                        return Ok(Scored::Missing(format!(
                            "{eid}/{}#{b}: no delta sketch against {} at block size {block_size}",
                            t.name, base.model_id
                        )));
                    }
                };
                out.push(Candidate {
                    expert_idx: ei as u32,
                    tensor_id: tensor_id.clone(),
                    block_idx: b as u64,
                    score: delta / (r.shape as f64).sqrt(),
                    size: r.bytes,
                });
            }
            consulted += records
                .iter()
                .map(|r| {
                    catalog
                        .raw_line(
                            RecordKind::BlockMeta,
                            &[
                                KeyPart::from(r.key.model_id.as_str()),
                                KeyPart::from(r.key.tensor_id.as_str()),
                                KeyPart::Int(r.key.block_idx),
                            ],
                        )
                        .map_or(0, |l| l.len() as u64 + 1)
                })
                .sum::<u64>();
        }
    }
    ledger.charge(Category::Meta, consulted);
    sort_candidates(&mut out);
    Ok(Scored::Complete(out))
}

/// Everything the planner needs besides the catalog.
pub struct PlanRequest<'a> {
    pub base: &'a Checkpoint,
    pub experts: &'a [ExpertInput],
    pub op: OperatorSpec,
    pub budget_b: u64,
    pub block_size: u64,
}

fn selection_from(
    candidates: &[Candidate],
    admitted: &[usize],
    k: usize,
    expand: impl Fn(&Candidate) -> std::ops::Range<u64>,
) -> Vec<Selection> {
    let mut raw: Vec<BTreeMap<String, Vec<u64>>> = vec![BTreeMap::new(); k];
    for &i in admitted {
        let c = &candidates[i];
        raw[c.expert_idx as usize]
            .entry(c.tensor_id.to_string())
            .or_default()
            .extend(expand(c));
    }
    raw.into_iter()
        .map(|m| {
            m.into_iter()
                .map(|(t, mut idx)| {
                    idx.sort_unstable();
                    idx.dedup();
                    (t, ranges_from_sorted(idx))
                })
                .collect()
        })
        .collect()
}

fn finish_plan(
    req: &PlanRequest<'_>,
    selected: Vec<Selection>,
    cost: u64,
    skipped: u64,
    fallback_cause: Option<String>,
    catalog: &mut Catalog,
    ledger: &IoLedger,
) -> Result<MergePlan> {
    let mut plan = MergePlan {
        plan_id: Digest::default(),
        op: req.op.normalized(),
        base_id: req.base.model_id().to_string(),
        expert_ids: req.experts.iter().map(|e| e.model_id().to_string()).collect(),
        expert_is_delta: req.experts.iter().map(|e| e.is_delta).collect(),
        block_size: req.block_size,
        selected,
        order: req.base.header().tensors.iter().map(|t| t.name.clone()).collect(),
        budget_b: req.budget_b,
        estimated_expert_cost: cost,
        fallback_used: fallback_cause.is_some(),
        fallback_cause,
        skipped_candidates: skipped,
    };
    plan.seal()?;
    let put = catalog.put(&plan.to_record()?)?;
    ledger.charge(Category::Meta, put.bytes);
    Ok(plan)
}

fn validate_request(req: &PlanRequest<'_>) -> Result<()> {
    req.op.validate()?;
    if req.block_size == 0 {
        return Err(Error::ZeroBlockSize);
    }
    check_structure(req.base.header(), req.experts)
}

/// Greedy budget-aware plan; falls back to tensor granularity when block
/// metadata is missing for any expert.
pub fn plan_gen(req: &PlanRequest<'_>, catalog: &mut Catalog, ledger: &IoLedger) -> Result<MergePlan> {
    validate_request(req)?;
    let expert_ids: Vec<String> = req.experts.iter().map(|e| e.model_id().to_string()).collect();
    match score_candidates(req.base.header(), &expert_ids, req.block_size, catalog, ledger)? {
        Scored::Complete(candidates) => {
            let g = greedy_select(&candidates, req.budget_b);
            let selected = selection_from(&candidates, &g.admitted, req.experts.len(), |c| {
                c.block_idx..c.block_idx + 1
            });
            finish_plan(req, selected, g.cost, g.skipped, None, catalog, ledger)
        }
        Scored::Missing(cause) => tensor_fallback_with_cause(req, cause, catalog, ledger),
    }
}

/// Tensor-level plan: rank whole expert tensors by delta norm, computed on
/// demand (charged as metadata I/O), and admit them greedily.
pub fn tensor_fallback(req: &PlanRequest<'_>, catalog: &mut Catalog, ledger: &IoLedger) -> Result<MergePlan> {
    validate_request(req)?;
    tensor_fallback_with_cause(req, "requested".into(), catalog, ledger)
}

fn tensor_fallback_with_cause(
    req: &PlanRequest<'_>,
    cause: String,
    catalog: &mut Catalog,
    ledger: &IoLedger,
) -> Result<MergePlan> {
    let base_header = req.base.header();
    let mut candidates = tensor_candidates(req, ledger)?;
    sort_candidates(&mut candidates);
    let g = greedy_select(&candidates, req.budget_b);
    let mut blocks_of = BTreeMap::new();
    for t in &base_header.tensors {
        blocks_of.insert(t.name.clone(), block_count(t, req.block_size)?);
    }
    let selected = selection_from(&candidates, &g.admitted, req.experts.len(), |c| {
        0..blocks_of[&*c.tensor_id]
    });
    finish_plan(req, selected, g.cost, g.skipped, Some(cause), catalog, ledger)
}

fn tensor_candidates(req: &PlanRequest<'_>, ledger: &IoLedger) -> Result<Vec<Candidate>> {
    let base_header = req.base.header();
    let mut out = Vec::new();
    for (ti, t) in base_header.tensors.iter().enumerate() {
        let tensor_id: Arc<str> = Arc::from(t.name.as_str());
        let needs_base = req.experts.iter().any(|e| !e.is_delta);
        let base_vals = if needs_base {
            ledger.charge(Category::Meta, t.length_bytes);
            Some(req.base.read_tensor(ti)?)
        } else {
            None
        };
        for (ei, e) in req.experts.iter().enumerate() {
            let eti = e.checkpoint.tensor_index(&t.name)?;
            let vals = e.checkpoint.read_tensor(eti)?;
            ledger.charge(Category::Meta, t.length_bytes);
            let sq: f64 = match (&base_vals, e.is_delta) {
                (Some(b), false) => vals
                    .iter()
                    .zip(b)
                    .map(|(x, y)| {
                        let d = *x as f64 - *y as f64;
                        d * d
                    })
                    .sum(),
                _ => vals.iter().map(|x| (*x as f64) * (*x as f64)).sum(),
            };
            out.push(Candidate {
                expert_idx: ei as u32,
                tensor_id: tensor_id.clone(),
                block_idx: 0,
                score: sq.sqrt(),
                size: t.length_bytes,
            });
        }
    }
    Ok(out)
}

/// A plan plus the checkpoint locations needed to execute it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub plan: MergePlan,
    pub base_path: PathBuf,
    pub expert_paths: Vec<PathBuf>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(e: u32, t: &str, b: u64, score: f64, size: u64) -> Candidate {
        Candidate {
            expert_idx: e,
            tensor_id: Arc::from(t),
            block_idx: b,
            score,
            size,
        }
    }

    #[test]
    fn greedy_hand_trace() {
        let c = vec![
            cand(0, "a", 0, 3.0, 10),
            cand(0, "a", 1, 2.0, 25),
            cand(1, "a", 0, 1.0, 5),
        ];
        let g = greedy_select(&c, 15);
        assert_eq!(g.admitted, vec![0, 2]);
        assert_eq!(g.cost, 15);
        assert_eq!(g.skipped, 1);
        assert_eq!(greedy_select(&c, 0).admitted, Vec::<usize>::new());
        assert_eq!(greedy_select(&c, 40).cost, 40);
    }

    #[test]
    fn equal_scores_use_tie_break() {
        // 2/sqrt(4) == 1/sqrt(1)
        let s1 = 2.0 / 4f64.sqrt();
        let s2 = 1.0 / 1f64.sqrt();
        assert_eq!(s1, s2);
        let mut c = vec![cand(1, "a", 0, s2, 4), cand(0, "b", 3, s1, 16), cand(0, "a", 7, s1, 16)];
        sort_candidates(&mut c);
        let order: Vec<(u32, &str, u64)> = c.iter().map(|c| (c.expert_idx, &*c.tensor_id, c.block_idx)).collect();
        assert_eq!(order, vec![(0, "a", 7), (0, "b", 3), (1, "a", 0)]);
    }

    #[test]
    fn budget_parsing() {
        assert_eq!("512MiB".parse::<Budget>().unwrap(), Budget::Bytes(512 << 20));
        assert_eq!("3GB".parse::<Budget>().unwrap(), Budget::Bytes(3_000_000_000));
        assert_eq!("4096".parse::<Budget>().unwrap(), Budget::Bytes(4096));
        assert_eq!("0.3".parse::<Budget>().unwrap(), Budget::Fraction(0.3));
        assert_eq!("1".parse::<Budget>().unwrap(), Budget::Fraction(1.0));
        assert_eq!("0".parse::<Budget>().unwrap(), Budget::Fraction(0.0));
        assert_eq!("1.5KiB".parse::<Budget>().unwrap(), Budget::Bytes(1536));
        assert!("lots".parse::<Budget>().is_err());
        assert!("12XB".parse::<Budget>().is_err());
        assert_eq!(Budget::Fraction(0.5).resolve(1001), 500);
    }
}
