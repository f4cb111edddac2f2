use std::collections::HashSet;

use crate::data::{ItemId, TrainingInstance};
use crate::error::{Error, Result};

/// Cutoffs reported by [`MetricsReport`].
pub const CUTOFFS: [usize; 3] = [5, 10, 20];

/// Candidates sorted by descending score, ties by ascending item id.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    pub candidates: Vec<(ItemId, f64)>,
    pub truth: ItemId,
    /// 1-based rank of `truth`.
    pub rank: usize,
}

pub fn rank_candidates(scored: &[(ItemId, f64)], truth: ItemId) -> Result<RankedList> {
    let mut seen = HashSet::with_capacity(scored.len());
    for &(i, _) in scored {
        if !seen.insert(i) {
            return Err(Error::DuplicateCandidate(i));
        }
    }
    if !seen.contains(&truth) {
        return Err(Error::UnknownId {
            kind: "ground-truth candidate",
            id: truth as usize,
        });
    }
    let mut candidates = scored.to_vec();
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let rank = candidates.iter().position(|c| c.0 == truth).expect("present") + 1;
    Ok(RankedList {
        candidates,
        truth,
        rank,
    })
}

/// Neumaier-compensated sum.
pub fn stable_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub fn hr_at_k(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

pub fn ndcg_gain(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

pub fn ndcg_at_k(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    stable_sum(ranks.iter().map(|&r| ndcg_gain(r, k))) / ranks.len() as f64
}

/// HR and NDCG at [`CUTOFFS`] over one set of instances.
#[derive(Clone, Debug, PartialEq)]
pub struct CohortMetrics {
    pub count: usize,
    pub hr: [f64; 3],
    pub ndcg: [f64; 3],
}

impl CohortMetrics {
    pub fn from_ranks(ranks: &[usize]) -> Self {
        Self {
            count: ranks.len(),
            hr: CUTOFFS.map(|k| hr_at_k(ranks, k)),
            ndcg: CUTOFFS.map(|k| ndcg_at_k(ranks, k)),
        }
    }

    pub fn hr_at(&self, k: usize) -> Option<f64> {
        CUTOFFS.iter().position(|&c| c == k).map(|i| self.hr[i])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        CUTOFFS.iter().position(|&c| c == k).map(|i| self.ndcg[i])
    }
}

/// Overall metrics with the new-item and repeat-item breakdown.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub overall: CohortMetrics,
    pub new: CohortMetrics,
    pub repeat: CohortMetrics,
}

impl MetricsReport {
    /// `repeat[i]` marks instance `i` as a repeat target.
    pub fn from_ranks(ranks: &[usize], repeat: &[bool]) -> Self {
        assert_eq!(ranks.len(), repeat.len());
        let pick = |want: bool| -> Vec<usize> {
            ranks.iter().zip(repeat).filter(|(_, &r)| r == want).map(|(&k, _)| k).collect()
        };
        Self {
            overall: CohortMetrics::from_ranks(ranks),
            new: CohortMetrics::from_ranks(&pick(false)),
            repeat: CohortMetrics::from_ranks(&pick(true)),
        }
    }

    /// One `cohort metric value` line per field.
    pub fn to_records(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, c) in [("overall", &self.overall), ("new", &self.new), ("repeat", &self.repeat)] {
            out.push(format!("{name}\tcount\t{}", c.count));
            for (i, k) in CUTOFFS.iter().enumerate() {
                out.push(format!("{name}\tHR@{k}\t{:.6}", c.hr[i]));
            }
            for (i, k) in CUTOFFS.iter().enumerate() {
                out.push(format!("{name}\tNDCG@{k}\t{:.6}", c.ndcg[i]));
            }
        }
        out
    }
}

/// Splits instances into (new, repeat) index lists: a target is a repeat
/// when the user consumed the item before the target time.
pub fn split_new_repeat(instances: &[TrainingInstance]) -> (Vec<usize>, Vec<usize>) {
    let mut new = Vec::new();
    let mut repeat = Vec::new();
    for (i, inst) in instances.iter().enumerate() {
        if inst.is_repeat() {
            repeat.push(i);
        } else {
            new.push(i);
        }
    }
    (new, repeat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn rank_examples() {
        let r = rank_candidates(&[(4, 0.1), (2, 0.9), (7, 0.3)], 2).unwrap();
        assert_eq!(r.rank, 1);
        let r = rank_candidates(&[(9, 0.5), (3, 0.5), (5, 0.5)], 5).unwrap();
        assert_eq!(r.rank, 2);
        assert!(matches!(rank_candidates(&[(1, 0.1), (1, 0.2)], 1), Err(Error::DuplicateCandidate(1))));
        assert!(rank_candidates(&[(1, 0.1)], 2).is_err());
    }

    #[test]
    fn rank_matches_stable_sort_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let n = rng.gen_range(1..30);
            let mut ids: Vec<u32> = (1..=60).collect();
            for i in 0..n {
                let j = rng.gen_range(i..ids.len());
                ids.swap(i, j);
            }
            let scored: Vec<(u32, f64)> = ids[..n].iter().map(|&i| (i, (rng.gen_range(0..5) as f64) / 4.0)).collect();
            let truth = scored[rng.gen_range(0..n)].0;
            // Oracle: count candidates that beat the truth.
            let ts = scored.iter().find(|c| c.0 == truth).unwrap().1;
            let better = scored.iter().filter(|c| c.1 > ts || (c.1 == ts && c.0 < truth)).count();
            assert_eq!(rank_candidates(&scored, truth).unwrap().rank, better + 1);
        }
    }

    #[test]
    fn metric_examples() {
        assert_eq!(ndcg_gain(1, 10), 1.0);
        assert_eq!(ndcg_gain(3, 10), 0.5);
        let ranks = [1, 3, 12];
        assert!((hr_at_k(&ranks, 10) - 2.0 / 3.0).abs() < 1e-15);
        assert!((ndcg_at_k(&ranks, 10) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn metrics_match_per_instance_formula() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let ranks: Vec<usize> = (0..rng.gen_range(1..40)).map(|_| rng.gen_range(1..30)).collect();
            for k in [5, 10, 20] {
                let mut hits = 0.0;
                let mut gain = 0.0;
                for &r in &ranks {
                    if r <= k {
                        hits += 1.0;
                        gain += 1.0 / ((r as f64) + 1.0).log2();
                    }
                }
                assert!((hr_at_k(&ranks, k) - hits / ranks.len() as f64).abs() < 1e-12);
                assert!((ndcg_at_k(&ranks, k) - gain / ranks.len() as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn candidate_order_does_not_change_rank() {
        let a = [(1, 0.3), (2, 0.3), (3, 0.9), (4, 0.1)];
        let b = [(4, 0.1), (3, 0.9), (2, 0.3), (1, 0.3)];
        assert_eq!(rank_candidates(&a, 2).unwrap().rank, rank_candidates(&b, 2).unwrap().rank);
    }

    proptest! {
        #[test]
        fn ndcg_below_hr_and_monotone(ranks in prop::collection::vec(1usize..50, 1..60)) {
            let mut last = (0.0, 0.0);
            for k in 1..40 {
                let (h, n) = (hr_at_k(&ranks, k), ndcg_at_k(&ranks, k));
                prop_assert!(n <= h + 1e-15);
                prop_assert!(h >= last.0 && n >= last.1 - 1e-15);
                last = (h, n);
            }
        }

        #[test]
        fn cohorts_recombine(ranks in prop::collection::vec(1usize..30, 1..50), seed in 0u64..100) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let repeat: Vec<bool> = ranks.iter().map(|_| rng.gen_bool(0.5)).collect();
            let r = MetricsReport::from_ranks(&ranks, &repeat);
            prop_assert_eq!(r.new.count + r.repeat.count, r.overall.count);
            for i in 0..3 {
                // Hit counts recombine exactly.
                let hits = r.new.hr[i] * r.new.count as f64 + r.repeat.hr[i] * r.repeat.count as f64;
                prop_assert_eq!(hits.round(), (r.overall.hr[i] * r.overall.count as f64).round());
                let weighted = hits / r.overall.count as f64;
                prop_assert!((weighted - r.overall.hr[i]).abs() < 1e-12);
            }
        }
    }
}
