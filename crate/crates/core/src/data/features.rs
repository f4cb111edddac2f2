use super::log::{ItemId, UserHistory, UserId};

/// Fixed-length item sequence, left-padded with id 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FixedSequence {
    pub ids: Vec<ItemId>,
    pub content_len: usize,
}

impl FixedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `true` for real (non-padding) positions.
    pub fn mask(&self) -> Vec<bool> {
        content_mask(self.ids.len(), self.content_len)
    }

    pub fn content(&self) -> &[ItemId] {
        &self.ids[self.ids.len() - self.content_len..]
    }
}

fn content_mask(len: usize, content: usize) -> Vec<bool> {
    (0..len).map(|i| i >= len - content).collect()
}

/// Keeps the most recent `len` items, left-padding with 0 when shorter.
pub fn truncate_or_pad(items: &[ItemId], len: usize) -> FixedSequence {
    assert!(len >= 1, "sequence length must be positive");
    let keep = items.len().min(len);
    let mut ids = vec![0; len - keep];
    ids.extend_from_slice(&items[items.len() - keep..]);
    FixedSequence {
        ids,
        content_len: keep,
    }
}

/// Discretised gaps between consecutive timestamps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntervalSequence {
    pub bins: Vec<u32>,
    pub content_len: usize,
}

impl IntervalSequence {
    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    pub fn mask(&self) -> Vec<bool> {
        content_mask(self.bins.len(), self.content_len)
    }

    pub fn content(&self) -> &[u32] {
        &self.bins[self.bins.len() - self.content_len..]
    }

    /// Most recent `width` bins, left-padded with bin 0 (masked).
    pub fn fit(&self, width: usize) -> IntervalSequence {
        let content = self.content();
        let keep = content.len().min(width);
        let mut bins = vec![0; width - keep];
        bins.extend_from_slice(&content[content.len() - keep..]);
        IntervalSequence {
            bins,
            content_len: keep,
        }
    }
}

/// `⌊gap / p_min⌋` capped at `bin_max`.
pub fn interval_bin(gap: i64, p_min: i64, bin_max: u32) -> u32 {
    debug_assert!(p_min > 0);
    let b = gap.unsigned_abs() / p_min as u64;
    b.min(bin_max as u64) as u32
}

/// Bins of the gaps between consecutive timestamps.
pub fn discretize_intervals(timestamps: &[i64], p_min: i64, bin_max: u32) -> IntervalSequence {
    assert!(p_min > 0, "p_min must be positive");
    let bins: Vec<u32> = timestamps
        .windows(2)
        .map(|w| interval_bin(w[1] - w[0], p_min, bin_max))
        .collect();
    IntervalSequence {
        content_len: bins.len(),
        bins,
    }
}

/// Target interval of a candidate: a bin, or `New` when the user never
/// interacted with the item before.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TargetInterval {
    New,
    Bin(u32),
}

impl TargetInterval {
    /// Row in the interval embedding table: bins `0..=bin_max`, then NEW.
    pub fn embedding_row(self, bin_max: u32) -> usize {
        match self {
            TargetInterval::Bin(b) => b.min(bin_max) as usize,
            TargetInterval::New => bin_max as usize + 1,
        }
    }

    pub fn is_new(self) -> bool {
        matches!(self, TargetInterval::New)
    }
}

impl std::fmt::Display for TargetInterval {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TargetInterval::New => f.write_str("NEW"),
            TargetInterval::Bin(b) => write!(f, "{b}"),
        }
    }
}

/// Unpadded repeat context of one candidate item at one time.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RepeatContext {
    /// Items strictly between the previous occurrence and the target.
    pub behavior: Vec<ItemId>,
    /// Items before the previous occurrence.
    pub last_repeat: Vec<ItemId>,
    /// Gaps between all prior occurrences of the item.
    pub history_intervals: IntervalSequence,
    pub target: TargetInterval,
}

/// Repeat context of `candidate` at time `t` given the events before it.
pub fn candidate_context(
    prior: &UserHistory,
    candidate: ItemId,
    t: i64,
    p_min: i64,
    bin_max: u32,
) -> RepeatContext {
    let Some(j) = prior.items.iter().rposition(|&i| i == candidate) else {
        return RepeatContext {
            behavior: Vec::new(),
            last_repeat: Vec::new(),
            history_intervals: IntervalSequence {
                bins: Vec::new(),
                content_len: 0,
            },
            target: TargetInterval::New,
        };
    };
    let occurrences: Vec<i64> = prior
        .items
        .iter()
        .zip(&prior.times)
        .filter(|(&i, _)| i == candidate)
        .map(|(_, &ts)| ts)
        .collect();
    RepeatContext {
        behavior: prior.items[j + 1..].to_vec(),
        last_repeat: prior.items[..j].to_vec(),
        history_intervals: discretize_intervals(&occurrences, p_min, bin_max),
        target: TargetInterval::Bin(interval_bin(t - prior.times[j], p_min, bin_max)),
    }
}

/// Repeat context of the event at position `k` of `history`, built only
/// from events before `k`.
pub fn extract_repeat_context(
    history: &UserHistory,
    k: usize,
    p_min: i64,
    bin_max: u32,
) -> RepeatContext {
    let prior = history.prefix(k);
    candidate_context(&prior, history.items[k], history.times[k], p_min, bin_max)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureConfig {
    /// Behavior / last-repeat sequence length `L`.
    pub seq_len: usize,
    /// Interval-history width `n` (also the matrix width).
    pub history_len: usize,
    pub p_min: i64,
    pub bin_max: u32,
}

/// One scored (user, item, time) example with fixed-width features.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingInstance {
    pub user: UserId,
    pub target_item: ItemId,
    /// Index of the target event in the user's full history.
    pub position: usize,
    pub timestamp: i64,
    pub target_interval: TargetInterval,
    pub behavior_seq: FixedSequence,
    pub last_repeat_seq: FixedSequence,
    pub history_intervals: IntervalSequence,
    pub label: u8,
}

impl TrainingInstance {
    pub fn is_repeat(&self) -> bool {
        !self.target_interval.is_new()
    }
}

/// Features of `candidate` scored at event `position` of `history`.
pub fn build_instance(
    user: UserId,
    history: &UserHistory,
    position: usize,
    candidate: ItemId,
    label: u8,
    cfg: &FeatureConfig,
) -> TrainingInstance {
    let prior = history.prefix(position);
    let t = history.times[position];
    let ctx = candidate_context(&prior, candidate, t, cfg.p_min, cfg.bin_max);
    TrainingInstance {
        user,
        target_item: candidate,
        position,
        timestamp: t,
        target_interval: ctx.target,
        behavior_seq: truncate_or_pad(&ctx.behavior, cfg.seq_len),
        last_repeat_seq: truncate_or_pad(&ctx.last_repeat, cfg.seq_len),
        history_intervals: ctx.history_intervals.fit(cfg.history_len),
        label,
    }
}

/// One positive instance per target position in `targets`.
///
/// Position 0 is never a target. With `from_start == false` only positions
/// `>= seq_len` are used (each then has a full window of `seq_len` prior
/// events).
pub fn sliding_window_instances(
    user: UserId,
    history: &UserHistory,
    targets: std::ops::Range<usize>,
    cfg: &FeatureConfig,
    from_start: bool,
) -> Vec<TrainingInstance> {
    let first = if from_start { 1 } else { cfg.seq_len.max(1) };
    targets
        .filter(|&k| k >= first && k < history.len())
        .map(|k| build_instance(user, history, k, history.items[k], 1, cfg))
        .collect()
}
