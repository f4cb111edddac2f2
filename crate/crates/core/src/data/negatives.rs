use std::collections::HashSet;

use rand::seq::index::sample;
use rand::Rng;

use super::log::ItemId;
use crate::error::{Error, Result};

/// Draws `k` distinct items uniformly from `1..=num_items` minus `exclude`.
///
/// Rejection sampling is used while candidates are plentiful; otherwise the
/// candidate set is enumerated. Output order is the draw order.
pub fn sample_negatives<R: Rng>(
    num_items: usize,
    exclude: &HashSet<ItemId>,
    k: usize,
    rng: &mut R,
) -> Result<Vec<ItemId>> {
    let excluded = exclude
        .iter()
        .filter(|&&i| i >= 1 && i as usize <= num_items)
        .count();
    let available = num_items - excluded;
    if available < k {
        return Err(Error::InsufficientCandidates {
            available,
            requested: k,
        });
    }
    if available >= 4 * k {
        let mut out = Vec::with_capacity(k);
        let mut chosen = HashSet::with_capacity(k);
        while out.len() < k {
            let i = rng.gen_range(1..=num_items as ItemId);
            if !exclude.contains(&i) && chosen.insert(i) {
                out.push(i);
            }
        }
        return Ok(out);
    }
    let candidates: Vec<ItemId> = (1..=num_items as ItemId)
        .filter(|i| !exclude.contains(i))
        .collect();
    Ok(sample(rng, candidates.len(), k)
        .into_iter()
        .map(|idx| candidates[idx])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forced_set() {
        let ex: HashSet<_> = [1, 2].into();
        let mut got = sample_negatives(5, &ex, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        got.sort_unstable();
        assert_eq!(got, vec![3, 4, 5]);
    }

    #[test]
    fn seeded_draws_repeat() {
        let ex: HashSet<_> = [4].into();
        let a = sample_negatives(100, &ex, 10, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_negatives(100, &ex, 10, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let distinct: HashSet<_> = a.iter().collect();
        assert_eq!(distinct.len(), 10);
        assert!(!a.contains(&4));
    }

    #[test]
    fn insufficient_candidates() {
        let ex: HashSet<_> = [1, 2, 3].into();
        assert!(matches!(
            sample_negatives(4, &ex, 2, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::InsufficientCandidates {
                available: 1,
                requested: 2
            })
        ));
    }

    #[test]
    fn single_draws_are_uniform() {
        // 10 candidates out of 12 items; each frequency within 3 sigma.
        let ex: HashSet<_> = [3, 7].into();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut counts = [0usize; 13];
        let draws = 10_000;
        for _ in 0..draws {
            counts[sample_negatives(12, &ex, 1, &mut rng).unwrap()[0] as usize] += 1;
        }
        let p = 0.1;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for (i, &c) in counts.iter().enumerate().skip(1) {
            if ex.contains(&(i as u32)) {
                assert_eq!(c, 0);
            } else {
                assert!((c as f64 - draws as f64 * p).abs() < 3.0 * sigma, "item {i}: {c}");
            }
        }
    }

    #[test]
    fn enumeration_path_is_uniform_too() {
        let ex = HashSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 6];
        for _ in 0..10_000 {
            for i in sample_negatives(5, &ex, 2, &mut rng).unwrap() {
                counts[i as usize] += 1;
            }
        }
        let sigma = (10_000f64 * 0.4 * 0.6).sqrt();
        for &c in &counts[1..] {
            assert!((c as f64 - 4000.0).abs() < 3.0 * sigma);
        }
    }
}
