//! Block importance scoring and pruning plans.
//!
//! Three criteria are normalized into one ranking:
//! * ablation similarity: remove the block, greedily continue every
//!   calibration prompt with both models, embed the two continuations, and
//!   average their cosine similarity (high similarity = safe to prune);
//! * weight magnitude: sum of |parameter| over the block (low = prune);
//! * input/output cosine: mean cosine between the residual stream entering
//!   and leaving the block (high = block changes little = prune).

use crate::calibration::CalibrationSet;
use crate::error::{Error, Result};
use crate::matrix::cosine_similarity;
use crate::model::ModelCheckpoint;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// Greedy continuation length used while scoring.
pub const DEFAULT_GEN_TOKENS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceCriterion {
    AblationSimilarity,
    WeightMagnitude,
    IoCosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanStrategy {
    OneShot,
    Recompute,
}

/// Maps a token sequence to a fixed-length vector for comparing generated
/// continuations. Implementations must be deterministic.
pub trait EmbeddingFunction {
    fn embed(&self, tokens: &[u32]) -> Result<Vec<f32>>;
}

/// Default embedding: mean-pooled final hidden state of a fixed reference
/// model (normally the unpruned original) over the token sequence.
pub struct MeanHiddenEmbedding<'a> {
    pub model: &'a ModelCheckpoint,
}

impl EmbeddingFunction for MeanHiddenEmbedding<'_> {
    fn embed(&self, tokens: &[u32]) -> Result<Vec<f32>> {
        let (_, states) = self.model.forward_captured(tokens)?;
        let last = states.last().expect("capture always returns states");
        let d = last.cols();
        let mut out = vec![0.0f32; d];
        for i in 0..last.rows() {
            for (o, &v) in out.iter_mut().zip(last.row(i).iter()) {
                *o += v;
            }
        }
        let n = last.rows() as f32;
        for o in &mut out {
            *o /= n;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub criterion: ImportanceCriterion,
    /// Raw per-block scores, keyed by current block position.
    pub scores: BTreeMap<usize, f64>,
    /// True when a higher score means *less* important (similarity-style).
    pub similarity_semantics: bool,
    pub protected: BTreeSet<usize>,
    pub seed: u64,
}

impl ImportanceReport {
    /// Prunable blocks ordered least-important-first; ties break to the
    /// lower block index.
    pub fn ascending_importance(&self) -> Vec<usize> {
        let mut order: Vec<(f64, usize)> = self
            .scores
            .iter()
            .map(|(&idx, &s)| {
                let importance = if self.similarity_semantics { -s } else { s };
                (importance, idx)
            })
            .collect();
        order.sort_by(|a, b| a.partial_cmp(b).expect("scores are finite"));
        order.into_iter().map(|(_, idx)| idx).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialize")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PruningPlan {
    /// Block indices to remove, in planned removal order, relative to the
    /// model the plan was built for.
    pub remove: Vec<usize>,
    pub strategy: PlanStrategy,
    pub criterion: ImportanceCriterion,
    pub seed: u64,
}

/// Continuation tokens (prompt excluded) from greedy decoding. The prompt
/// is truncated so that at least one new token fits under max_seq_len.
fn continuation(model: &ModelCheckpoint, prompt: &[u32], gen_tokens: usize) -> Result<Vec<u32>> {
    let budget = model.config.max_seq_len.saturating_sub(gen_tokens).max(1);
    let prompt = &prompt[..prompt.len().min(budget)];
    let full = model.generate(prompt, gen_tokens)?;
    Ok(full[prompt.len()..].to_vec())
}

/// Mean cosine similarity between embedded continuations of `model` with
/// `remove` blocks deleted and the untouched model, over all calibration
/// prompts.
pub fn ablation_similarity(
    model: &ModelCheckpoint,
    remove: &BTreeSet<usize>,
    cal: &CalibrationSet,
    g: &dyn EmbeddingFunction,
    gen_tokens: usize,
) -> Result<f64> {
    if cal.samples.is_empty() {
        return Err(Error::EmptyInput("calibration set".into()));
    }
    let pruned = model.remove_blocks(remove)?;
    let mut total = 0.0f64;
    for prompt in &cal.samples {
        let orig = continuation(model, prompt, gen_tokens)?;
        let abl = continuation(&pruned, prompt, gen_tokens)?;
        let e_orig = g.embed(&orig)?;
        let e_abl = g.embed(&abl)?;
        total += cosine_similarity(&e_orig, &e_abl)? as f64;
    }
    Ok(total / cal.samples.len() as f64)
}

/// Ablation similarity of removing the single block `block_idx`.
pub fn score_block_ablation(
    model: &ModelCheckpoint,
    block_idx: usize,
    cal: &CalibrationSet,
    g: &dyn EmbeddingFunction,
    gen_tokens: usize,
) -> Result<f64> {
    ablation_similarity(model, &BTreeSet::from([block_idx]), cal, g, gen_tokens)
}

/// Sum of absolute parameter values in the block; lower is pruned first.
pub fn score_block_magnitude(model: &ModelCheckpoint, block_idx: usize) -> Result<f64> {
    let block = model
        .blocks
        .get(block_idx)
        .ok_or(Error::UnknownBlock(block_idx))?;
    Ok(block.abs_sum())
}

/// Mean cosine between the hidden state entering and leaving the block,
/// over every token of every calibration sample.
pub fn score_block_io_cosine(
    model: &ModelCheckpoint,
    block_idx: usize,
    cal: &CalibrationSet,
) -> Result<f64> {
    if block_idx >= model.blocks.len() {
        return Err(Error::UnknownBlock(block_idx));
    }
    if cal.samples.is_empty() {
        return Err(Error::EmptyInput("calibration set".into()));
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for sample in &cal.samples {
        let (_, states) = model.forward_captured(sample)?;
        let (before, after) = (&states[block_idx], &states[block_idx + 1]);
        for i in 0..before.rows() {
            total += cosine_similarity(before.row(i), after.row(i))? as f64;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Score every non-protected block under one criterion.
pub fn rank_blocks(
    model: &ModelCheckpoint,
    criterion: ImportanceCriterion,
    cal: &CalibrationSet,
    g: &dyn EmbeddingFunction,
    gen_tokens: usize,
    seed: u64,
) -> Result<ImportanceReport> {
    let protected = model.protected_blocks();
    if model.blocks.len() <= protected.len() {
        return Err(Error::InvalidConfig(format!(
            "{} blocks leave nothing prunable",
            model.blocks.len()
        )));
    }
    let mut scores = BTreeMap::new();
    for idx in 0..model.blocks.len() {
        if protected.contains(&idx) {
            continue;
        }
        let s = match criterion {
            ImportanceCriterion::AblationSimilarity => {
                score_block_ablation(model, idx, cal, g, gen_tokens)?
            }
            ImportanceCriterion::WeightMagnitude => score_block_magnitude(model, idx)?,
            ImportanceCriterion::IoCosine => score_block_io_cosine(model, idx, cal)?,
        };
        scores.insert(idx, s);
    }
    Ok(ImportanceReport {
        criterion,
        scores,
        similarity_semantics: !matches!(criterion, ImportanceCriterion::WeightMagnitude),
        protected,
        seed,
    })
}

/// Select the `k` least-important blocks from a frozen report.
pub fn make_plan(report: &ImportanceReport, k: usize) -> Result<PruningPlan> {
    let order = report.ascending_importance();
    if k > order.len() {
        return Err(Error::InvalidConfig(format!(
            "k = {k} exceeds {} prunable blocks",
            order.len()
        )));
    }
    Ok(PruningPlan {
        remove: order[..k].to_vec(),
        strategy: PlanStrategy::OneShot,
        criterion: report.criterion,
        seed: report.seed,
    })
}

/// Remove one least-important block, rescore the shrunken model, and
/// repeat `k` times (ablation criterion only). Returned indices refer to
/// the original model's block positions.
pub fn make_plan_recompute(
    model: &ModelCheckpoint,
    cal: &CalibrationSet,
    g: &dyn EmbeddingFunction,
    k: usize,
    gen_tokens: usize,
    seed: u64,
) -> Result<PruningPlan> {
    let prunable = model.blocks.len().saturating_sub(model.protected_blocks().len());
    if k > prunable {
        return Err(Error::InvalidConfig(format!(
            "k = {k} exceeds {prunable} prunable blocks"
        )));
    }
    let mut working = model.clone();
    let mut remove = Vec::with_capacity(k);
    for _ in 0..k {
        let report = rank_blocks(
            &working,
            ImportanceCriterion::AblationSimilarity,
            cal,
            g,
            gen_tokens,
            seed,
        )?;
        let victim = report.ascending_importance()[0];
        // Record the block by its position in the *original* model.
        remove.push(working.block_ids[victim]);
        working = working.remove_blocks(&BTreeSet::from([victim]))?;
    }
    Ok(PruningPlan {
        remove,
        strategy: PlanStrategy::Recompute,
        criterion: ImportanceCriterion::AblationSimilarity,
        seed,
    })
}

/// Apply a plan to the model it was built for.
pub fn execute_plan(model: &ModelCheckpoint, plan: &PruningPlan) -> Result<ModelCheckpoint> {
    // Plans built by make_plan_recompute store original positions, which
    // only match current positions when executed on the original model;
    // translate through block_ids.
    let mut indices = BTreeSet::new();
    for &orig in &plan.remove {
        let pos = model
            .block_ids
            .iter()
            .position(|&id| id == orig)
            .ok_or(Error::UnknownBlock(orig))?;
        indices.insert(pos);
    }
    if indices.len() != plan.remove.len() {
        return Err(Error::InvalidConfig("duplicate block in plan".into()));
    }
    model.remove_blocks(&indices)
}
