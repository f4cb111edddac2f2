use std::collections::HashMap;
use std::ops::Range;

use super::log::{InteractionLog, UserHistory, UserId};
use crate::error::{Error, Result};

/// Drops items with fewer than `min_item_interactions` events, then users
/// left with at most one event, and re-densifies both vocabularies.
///
/// A single pass: users removed in the second step may push some items
/// back under the threshold, and those items are kept.
pub fn filter_cold_start(log: &InteractionLog, min_item_interactions: usize) -> Result<InteractionLog> {
    if min_item_interactions == 0 {
        return Err(Error::Config("min_item_interactions must be at least 1".into()));
    }
    let mut counts = vec![0usize; log.num_items() + 1];
    for h in log.histories() {
        for &i in &h.items {
            counts[i as usize] += 1;
        }
    }
    let keep_item: Vec<bool> = counts.iter().map(|&c| c >= min_item_interactions).collect();

    let mut kept_users = Vec::new();
    for (u, h) in log.users() {
        let mut filtered = UserHistory::default();
        for (&i, &t) in h.items.iter().zip(&h.times) {
            if keep_item[i as usize] {
                filtered.items.push(i);
                filtered.times.push(t);
            }
        }
        if filtered.len() > 1 {
            kept_users.push((u, filtered));
        }
    }
    if kept_users.is_empty() {
        return Err(Error::Empty("no events left after cold-start filtering".into()));
    }

    // Re-densify items in order of their old dense id.
    let mut used = vec![false; log.num_items() + 1];
    for (_, h) in &kept_users {
        for &i in &h.items {
            used[i as usize] = true;
        }
    }
    let mut remap = vec![0u32; log.num_items() + 1];
    let mut item_vocab = Vec::new();
    for old in 1..=log.num_items() {
        if used[old] {
            item_vocab.push(log.item_vocab()[old - 1].clone());
            remap[old] = item_vocab.len() as u32;
        }
    }
    let mut user_vocab = Vec::with_capacity(kept_users.len());
    let mut histories = Vec::with_capacity(kept_users.len());
    for (u, mut h) in kept_users {
        user_vocab.push(log.user_vocab()[u as usize - 1].clone());
        for i in &mut h.items {
            *i = remap[*i as usize];
        }
        histories.push(h);
    }
    InteractionLog::from_histories(histories, user_vocab, item_vocab)
}

/// Per-user chronological partition of a log.
///
/// Events `0..train_end` of a user are training events, `train_end..val_end`
/// validation targets and `val_end..len` test targets. Validation and test
/// targets keep the full preceding history for feature construction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataSplit {
    pub log: InteractionLog,
    pub bounds: Vec<SplitBounds>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitBounds {
    pub train_end: usize,
    pub val_end: usize,
    pub len: usize,
}

impl SplitBounds {
    pub fn train(&self) -> Range<usize> {
        0..self.train_end
    }

    pub fn val(&self) -> Range<usize> {
        self.train_end..self.val_end
    }

    pub fn test(&self) -> Range<usize> {
        self.val_end..self.len
    }
}

impl DataSplit {
    pub fn bounds(&self, user: UserId) -> SplitBounds {
        self.bounds[user as usize - 1]
    }

    /// Training prefix of every user, indexed like `log.histories()`.
    pub fn train_histories(&self) -> Vec<UserHistory> {
        self.log
            .histories()
            .iter()
            .zip(&self.bounds)
            .map(|(h, b)| h.prefix(b.train_end))
            .collect()
    }

    /// Number of events in the train, validation and test parts.
    pub fn sizes(&self) -> (usize, usize, usize) {
        self.bounds.iter().fold((0, 0, 0), |(a, b, c), s| {
            (a + s.train().len(), b + s.val().len(), c + s.test().len())
        })
    }
}

/// Parses a `a,b,c` split specification.
pub fn parse_fractions(spec: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<f64> = spec
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Config(format!("bad split `{spec}`: {e}")))?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(Error::Config(format!("split `{spec}` needs three fractions"))),
    }
}

/// Splits every user's events into train/val/test by position.
///
/// A user with `n >= 3` events gets `floor(f_train * n)` training events,
/// `floor(f_val * n)` validation events and the remainder as test events.
/// Shorter users are entirely training data.
pub fn chronological_split(log: &InteractionLog, fractions: (f64, f64, f64)) -> Result<DataSplit> {
    let (ft, fv, fs) = fractions;
    if !(ft > 0.0 && fv > 0.0 && fs > 0.0) || ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must be positive and sum to 1, got {ft},{fv},{fs}"
        )));
    }
    // The small offset keeps e.g. 0.7 * 10 from flooring to 6.
    let floor = |f: f64, n: usize| (f * n as f64 + 1e-9).floor() as usize;
    let bounds = log
        .histories()
        .iter()
        .map(|h| {
            let n = h.len();
            if n < 3 {
                return SplitBounds {
                    train_end: n,
                    val_end: n,
                    len: n,
                };
            }
            let train_end = floor(ft, n);
            let val_end = (train_end + floor(fv, n)).min(n);
            SplitBounds {
                train_end,
                val_end,
                len: n,
            }
        })
        .collect();
    Ok(DataSplit {
        log: log.clone(),
        bounds,
    })
}

/// Smallest positive gap between consecutive interactions of one user with
/// one item, or 1 when the log has no such gap.
pub fn min_repeat_gap(histories: &[UserHistory]) -> i64 {
    let mut best = i64::MAX;
    for h in histories {
        let mut last: HashMap<u32, i64> = HashMap::new();
        for (&i, &t) in h.items.iter().zip(&h.times) {
            if let Some(prev) = last.insert(i, t) {
                let gap = t - prev;
                if gap > 0 {
                    best = best.min(gap);
                }
            }
        }
    }
    if best == i64::MAX {
        1
    } else {
        best
    }
}
