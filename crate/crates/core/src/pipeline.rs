//! Glue shared by the command line and the end-to-end tests.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{
    build_instance, chronological_split, filter_cold_start, DataSplit, InteractionLog, ItemId, RtimCache,
    TrainingInstance, UserId,
};
use crate::error::{Error, Result};
use crate::model::{build_rtim, groups_loss, resolve_p_min, training_positives, ModelConfig, ScoredGroup, TsRec};
use crate::numerics::{derive_seed, finite_difference_check, GradCheckOptions, GradCheckReport};

/// Cold-start filtering, chronological split, interval unit resolution and
/// the training-side repeat interval matrices.
pub fn prepare(
    log: &InteractionLog,
    min_item_count: usize,
    fractions: (f64, f64, f64),
    config: &mut ModelConfig,
) -> Result<(DataSplit, RtimCache)> {
    let log = if min_item_count > 1 {
        filter_cold_start(log, min_item_count)?
    } else {
        log.clone()
    };
    let split = chronological_split(&log, fractions)?;
    resolve_p_min(config, &split);
    let rtim = build_rtim(config, &split);
    Ok((split, rtim))
}

/// Probe instance for `(user, item)` at the user's first test event, or
/// `None` when the user has no test event or fewer than two prior
/// occurrences of the item.
pub fn probe_instance(
    split: &DataSplit,
    user: UserId,
    item: ItemId,
    config: &ModelConfig,
) -> Option<TrainingInstance> {
    let h = split.log.user(user);
    let pos = split.bounds(user).val_end;
    if pos >= h.len() || h.items[..pos].iter().filter(|&&i| i == item).count() < 2 {
        return None;
    }
    Some(build_instance(user, h, pos, item, 1, &config.features()))
}

/// Finite-difference check of the full model loss on up to `groups` repeat
/// positives from the training part, each with one unseen negative.
///
/// Biases start uniformly in ±0.3 rather than at zero so that relu inputs
/// of empty sequences sit away from the kink.
pub fn gradient_check(
    split: &DataSplit,
    rtim: &RtimCache,
    config: &ModelConfig,
    groups: usize,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let log = &split.log;
    let mut model = TsRec::new(config.clone(), log.num_users(), log.num_items())?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[4]));
    for id in model.store.ids().collect::<Vec<_>>() {
        if model.store.name(id).ends_with(".b") {
            model.store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
        }
    }
    let features = config.features();
    let mut chosen = Vec::new();
    for p in training_positives(config, split) {
        if chosen.len() == groups {
            break;
        }
        if !p.is_repeat() || p.behavior_seq.content_len == 0 {
            continue;
        }
        let h = log.user(p.user);
        let seen: HashSet<ItemId> = h.items[..=p.position].iter().copied().collect();
        if let Some(neg) = (1..=log.num_items() as ItemId).find(|i| !seen.contains(i)) {
            chosen.push(ScoredGroup {
                negatives: vec![build_instance(p.user, h, p.position, neg, 0, &features)],
                positive: p,
            });
        }
    }
    if chosen.is_empty() {
        return Err(Error::Empty("no repeat positives for the gradient check".into()));
    }
    let n = chosen.len();
    finite_difference_check(&model.store, opts, |tape| groups_loss(&model, tape, &chosen, rtim, n, None))
}
