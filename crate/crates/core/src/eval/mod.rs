//! Sampled-candidate ranking evaluation, new/repeat cohorts, dataset
//! analyses and the interval probe.

mod analysis;
mod metrics;
mod probe;

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use analysis::{
    avg_interactions, interval_histogram, jaccard_repeat_similarity, jaccard_repeat_similarity_where,
    repeat_context_jaccard, repeat_ratio, DatasetStats,
};
pub use metrics::{
    hr_at_k, ndcg_at_k, ndcg_gain, rank_candidates, split_new_repeat, stable_sum, CohortMetrics,
    MetricsReport, RankedList, CUTOFFS,
};
pub use probe::{curve_argmax, probe_interval_response};

use crate::data::{build_instance, sample_negatives, DataSplit, FeatureConfig, ItemId};
use crate::error::Result;
use crate::model::{FrozenParts, PopRec, ScoredGroup, TsRec};
use crate::data::RtimCache;
use crate::numerics::derive_seed;

/// Which held-out part of a split to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Validation,
    Test,
}

/// One group per held-out event: the positive plus up to `num_negatives`
/// items the user never interacted with.
///
/// Negatives are drawn once from a stream derived from `(seed, part, user,
/// position)`; when fewer items are available than requested, all of them
/// are used.
pub fn build_eval_groups(
    split: &DataSplit,
    part: Part,
    num_negatives: usize,
    features: &FeatureConfig,
    seed: u64,
) -> Result<Vec<ScoredGroup>> {
    let num_items = split.log.num_items();
    let mut out = Vec::new();
    for (u, h) in split.log.users() {
        let b = split.bounds(u);
        let range = match part {
            Part::Validation => b.val(),
            Part::Test => b.test(),
        };
        if range.is_empty() {
            continue;
        }
        let seen: HashSet<ItemId> = h.items.iter().copied().collect();
        let k = num_negatives.min(num_items - seen.len());
        for pos in range {
            let positive = build_instance(u, h, pos, h.items[pos], 1, features);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[part as u64, u as u64, pos as u64]));
            let negatives = sample_negatives(num_items, &seen, k, &mut rng)?
                .into_iter()
                .map(|i| build_instance(u, h, pos, i, 0, features))
                .collect();
            out.push(ScoredGroup { positive, negatives });
        }
    }
    Ok(out)
}

/// Anything that can score the candidates of a group.
pub trait Ranker: Sync {
    /// Scores of the positive followed by the negatives.
    fn score_group(&self, group: &ScoredGroup) -> Result<Vec<f64>>;
}

/// A trained model with its precomputed item-side parts.
pub struct ModelRanker<'a> {
    pub model: &'a TsRec,
    pub rtim: &'a RtimCache,
    pub frozen: FrozenParts,
}

impl<'a> ModelRanker<'a> {
    pub fn new(model: &'a TsRec, rtim: &'a RtimCache) -> Result<Self> {
        Ok(Self {
            model,
            rtim,
            frozen: model.freeze(rtim)?,
        })
    }
}

impl Ranker for ModelRanker<'_> {
    fn score_group(&self, group: &ScoredGroup) -> Result<Vec<f64>> {
        let insts: Vec<_> = std::iter::once(&group.positive).chain(&group.negatives).cloned().collect();
        self.model.score_many(&insts, self.rtim, &self.frozen)
    }
}

impl Ranker for PopRec {
    fn score_group(&self, group: &ScoredGroup) -> Result<Vec<f64>> {
        Ok(std::iter::once(&group.positive)
            .chain(&group.negatives)
            .map(|i| self.score(i.target_item))
            .collect())
    }
}

/// 1-based rank of each group's positive.
pub fn rank_groups(ranker: &dyn Ranker, groups: &[ScoredGroup]) -> Result<Vec<usize>> {
    groups
        .par_iter()
        .map(|g| {
            let scores = ranker.score_group(g)?;
            let scored: Vec<(ItemId, f64)> = std::iter::once(&g.positive)
                .chain(&g.negatives)
                .map(|i| i.target_item)
                .zip(scores)
                .collect();
            Ok(rank_candidates(&scored, g.positive.target_item)?.rank)
        })
        .collect()
}

pub fn evaluate(ranker: &dyn Ranker, groups: &[ScoredGroup]) -> Result<MetricsReport> {
    let ranks = rank_groups(ranker, groups)?;
    let repeat: Vec<bool> = groups.iter().map(|g| g.positive.is_repeat()).collect();
    Ok(MetricsReport::from_ranks(&ranks, &repeat))
}
