use std::collections::{BTreeMap, HashSet};

use crate::data::{interval_bin, InteractionLog, ItemId, UserHistory, UserId};
use crate::eval::metrics::stable_sum;

/// Fraction of events whose item already occurred earlier for that user.
pub fn repeat_ratio(log: &InteractionLog) -> f64 {
    let events = log.num_events();
    if events == 0 {
        return 0.0;
    }
    let repeats: usize = log.histories().iter().map(count_repeats).sum();
    repeats as f64 / events as f64
}

fn count_repeats(h: &UserHistory) -> usize {
    let mut seen = HashSet::new();
    h.items.iter().filter(|&&i| !seen.insert(i)).count()
}

pub fn avg_interactions(log: &InteractionLog) -> f64 {
    if log.num_users() == 0 {
        0.0
    } else {
        log.num_events() as f64 / log.num_users() as f64
    }
}

/// Counts of discretized gaps between consecutive occurrences of the same
/// item for the same user, optionally restricted to one item.
pub fn interval_histogram(
    log: &InteractionLog,
    item: Option<ItemId>,
    p_min: i64,
    bin_max: u32,
) -> BTreeMap<u32, usize> {
    let mut out = BTreeMap::new();
    for h in log.histories() {
        let mut last: std::collections::HashMap<ItemId, i64> = Default::default();
        for (&i, &t) in h.items.iter().zip(&h.times) {
            if let Some(prev) = last.insert(i, t) {
                if item.map_or(true, |want| want == i) {
                    *out.entry(interval_bin(t - prev, p_min, bin_max)).or_insert(0) += 1;
                }
            }
        }
    }
    out
}

/// Set similarity of the items between the previous occurrence and the
/// target, against the same number of items preceding the previous
/// occurrence. Returns `None` when both sets are empty.
pub fn repeat_context_jaccard(h: &UserHistory, k: usize) -> Option<f64> {
    let item = h.items[k];
    let j = h.items[..k].iter().rposition(|&i| i == item)?;
    let behavior = &h.items[j + 1..k];
    let last = &h.items[j.saturating_sub(behavior.len())..j];
    let a: HashSet<ItemId> = behavior.iter().copied().collect();
    let b: HashSet<ItemId> = last.iter().copied().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return None;
    }
    Some(a.intersection(&b).count() as f64 / union as f64)
}

/// Mean repeat-context Jaccard over repeat instances, as a percentage.
pub fn jaccard_repeat_similarity(log: &InteractionLog) -> f64 {
    jaccard_repeat_similarity_where(log, |_, _| true)
}

/// As [`jaccard_repeat_similarity`], over the repeat instances accepted by
/// `keep(user, item)`.
pub fn jaccard_repeat_similarity_where(log: &InteractionLog, keep: impl Fn(UserId, ItemId) -> bool) -> f64 {
    let mut values = Vec::new();
    for (u, h) in log.users() {
        for k in 1..h.len() {
            if keep(u, h.items[k]) {
                values.extend(repeat_context_jaccard(h, k));
            }
        }
    }
    if values.is_empty() {
        return 0.0;
    }
    100.0 * stable_sum(values.iter().copied()) / values.len() as f64
}

/// Table-style statistics of one log.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub events: usize,
    pub avg_interactions: f64,
    pub repeat_ratio: f64,
}

impl DatasetStats {
    pub fn of(log: &InteractionLog) -> Self {
        Self {
            users: log.num_users(),
            items: log.num_items(),
            events: log.num_events(),
            avg_interactions: avg_interactions(log),
            repeat_ratio: repeat_ratio(log),
        }
    }

    pub fn to_records(&self) -> Vec<String> {
        vec![
            format!("users\t{}", self.users),
            format!("items\t{}", self.items),
            format!("events\t{}", self.events),
            format!("avg_interactions\t{:.6}", self.avg_interactions),
            format!("repeat_ratio\t{:.6}", self.repeat_ratio),
        ]
    }
}
