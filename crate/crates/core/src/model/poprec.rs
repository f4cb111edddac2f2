use crate::data::{ItemId, UserHistory};

/// Ranks items by training-set interaction count; ties go to the smaller id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PopRec {
    counts: Vec<u64>,
}

impl PopRec {
    pub fn fit(train: &[UserHistory], num_items: usize) -> Self {
        let mut counts = vec![0u64; num_items + 1];
        for h in train {
            for &i in &h.items {
                counts[i as usize] += 1;
            }
        }
        Self { counts }
    }

    /// Training count of `item`; unknown items score 0.
    pub fn score(&self, item: ItemId) -> f64 {
        self.counts.get(item as usize).copied().unwrap_or(0) as f64
    }

    /// The `k` most popular items.
    pub fn top_k(&self, k: usize) -> Vec<ItemId> {
        let mut items: Vec<ItemId> = (1..self.counts.len() as ItemId).collect();
        items.sort_by(|&a, &b| self.counts[b as usize].cmp(&self.counts[a as usize]).then(a.cmp(&b)));
        items.truncate(k);
        items
    }
}
