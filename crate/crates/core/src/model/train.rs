use std::collections::HashSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::ModelConfig;
use super::net::{groups_loss, ScoredGroup, TsRec};
use crate::data::{
    build_instance, min_repeat_gap, sample_negatives, sliding_window_instances, DataSplit, ItemId, RtimCache,
    TrainingInstance, UserHistory,
};
use crate::error::{Error, Result};
use crate::eval::{build_eval_groups, evaluate, ModelRanker, Part};
use crate::layers::Dropout;
use crate::numerics::{adam_step, derive_seed, AdamConfig, Gradients, Tape};

/// One line of the training history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_hr10: f64,
    pub val_ndcg10: f64,
    pub wall_secs: f64,
}

impl EpochRecord {
    pub const COLUMNS: &'static str = "epoch\ttrain_loss\tval_loss\tval_hr10\tval_ndcg10\twall_secs";

    /// Tab-separated record. Wall time is excluded from `deterministic`
    /// output.
    pub fn to_line(&self, with_time: bool) -> String {
        let time = if with_time {
            format!("{:.3}", self.wall_secs)
        } else {
            "-".into()
        };
        format!(
            "{}\t{:.12}\t{:.12}\t{:.6}\t{:.6}\t{}",
            self.epoch, self.train_loss, self.val_loss, self.val_hr10, self.val_ndcg10, time
        )
    }
}

pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation loss.
    pub model: TsRec,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Replaces an automatic (`0`) interval unit by the smallest repeat gap in
/// the training data.
pub fn resolve_p_min(config: &mut ModelConfig, split: &DataSplit) {
    if config.p_min == 0 {
        config.p_min = min_repeat_gap(&split.train_histories());
    }
}

/// Repeat interval matrices from the training part only.
pub fn build_rtim(config: &ModelConfig, split: &DataSplit) -> RtimCache {
    RtimCache::build(&split.train_histories(), split.log.num_items(), config.matrix())
}

/// Training positives: every training event past the first of each user.
pub fn training_positives(config: &ModelConfig, split: &DataSplit) -> Vec<TrainingInstance> {
    let features = config.features();
    split
        .log
        .users()
        .flat_map(|(u, h)| sliding_window_instances(u, h, split.bounds(u).train(), &features, config.train_from_start))
        .collect()
}

/// Negatives of one positive for one epoch: unseen items (NEW targets) and
/// previously consumed items other than the target, all at the target time.
fn epoch_negatives(
    config: &ModelConfig,
    positive: &TrainingInstance,
    history: &UserHistory,
    train_items: &HashSet<ItemId>,
    num_items: usize,
    stream: u64,
    random: usize,
) -> Result<Vec<TrainingInstance>> {
    let features = config.features();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        config.seed,
        &[1, stream, positive.user as u64, positive.position as u64],
    ));
    let k = random.min(num_items - train_items.len());
    let mut items = sample_negatives(num_items, train_items, k, &mut rng)?;
    if config.repeat_negatives > 0 {
        let mut seen: Vec<ItemId> = history.items[..positive.position]
            .iter()
            .copied()
            .filter(|&i| i != positive.target_item)
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        seen.sort_unstable();
        seen.shuffle(&mut rng);
        items.extend(seen.into_iter().take(config.repeat_negatives));
    }
    Ok(items
        .into_iter()
        .map(|i| build_instance(positive.user, history, positive.position, i, 0, &features))
        .collect())
}

/// Gradient of the summed loss of one batch, built from fixed-size chunks
/// evaluated in parallel and merged in chunk order.
pub fn batch_gradients(
    model: &TsRec,
    groups: &[ScoredGroup],
    rtim: &RtimCache,
    seed_path: &[u64],
) -> Result<(Gradients, f64)> {
    let chunk = model.config.chunk_size;
    let rate = model.config.dropout;
    let parts: Vec<Result<(Gradients, f64)>> = groups
        .par_chunks(chunk)
        .enumerate()
        .map(|(c, g)| {
            let mut tape = Tape::new(&model.store);
            let mut path = seed_path.to_vec();
            path.push(c as u64);
            let mut drop = (rate > 0.0).then(|| Dropout {
                rate,
                rng: ChaCha8Rng::seed_from_u64(derive_seed(model.config.seed, &path)),
            });
            let loss = groups_loss(model, &mut tape, g, rtim, groups.len(), drop.as_mut())?;
            let value = tape.value(loss).item();
            Ok((tape.backward(loss)?, value))
        })
        .collect();
    let mut total = Gradients::new(model.store.len());
    let mut loss = 0.0;
    for p in parts {
        let (g, l) = p?;
        total.merge(g);
        loss += l;
    }
    Ok((total, loss))
}

/// Mean-per-positive loss of `groups` without dropout, computed in the same
/// fixed chunk order as training.
pub fn eval_loss(model: &TsRec, groups: &[ScoredGroup], rtim: &RtimCache) -> Result<f64> {
    let parts: Vec<Result<f64>> = groups
        .par_chunks(model.config.chunk_size)
        .map(|g| {
            let mut tape = Tape::new(&model.store);
            let loss = groups_loss(model, &mut tape, g, rtim, groups.len(), None)?;
            Ok(tape.value(loss).item())
        })
        .collect();
    parts.into_iter().sum()
}

/// Trains with Adam and early stopping on validation loss.
///
/// `config.p_min` must already be resolved and `rtim` built from the
/// training part. `on_epoch` sees every record as it is produced.
pub fn train(
    config: &ModelConfig,
    split: &DataSplit,
    rtim: &RtimCache,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if config.p_min == 0 {
        return Err(Error::Config("p_min must be resolved before training".into()));
    }
    let log = &split.log;
    let num_items = log.num_items();
    let mut model = TsRec::new(config.clone(), log.num_users(), num_items)?;
    let positives = training_positives(config, split);
    if positives.is_empty() {
        return Err(Error::Empty("no training positives".into()));
    }
    let train_items: Vec<HashSet<ItemId>> = split
        .train_histories()
        .iter()
        .map(|h| h.items.iter().copied().collect())
        .collect();
    let val = build_eval_groups(split, Part::Validation, config.val_negatives, &config.features(), config.seed)?;
    // Selection groups: the validation groups plus fixed repeat negatives.
    let mut val_loss_groups = val.clone();
    for g in &mut val_loss_groups {
        let p = &g.positive;
        let extra = epoch_negatives(config, p, log.user(p.user), &HashSet::new(), num_items, 0, 0)?;
        g.negatives.extend(extra);
    }
    let adam = AdamConfig {
        lr: config.lr,
        ..Default::default()
    };

    let mut best: Option<(f64, TsRec, usize)> = None;
    let mut since_best = 0;
    let mut history = Vec::new();
    for epoch in 1..=config.max_epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..positives.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[2, epoch as u64])));
        let mut epoch_loss = 0.0;
        let mut counted = 0usize;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let mut groups = Vec::with_capacity(batch.len());
            for &i in batch {
                let p = &positives[i];
                let u = p.user as usize;
                let negatives = epoch_negatives(
                    config,
                    p,
                    log.user(p.user),
                    &train_items[u - 1],
                    num_items,
                    epoch as u64,
                    config.train_negatives,
                )?;
                if !negatives.is_empty() {
                    groups.push(ScoredGroup {
                        positive: p.clone(),
                        negatives,
                    });
                }
            }
            if groups.is_empty() {
                continue;
            }
            let (grads, loss) = batch_gradients(&model, &groups, rtim, &[3, epoch as u64, b as u64])?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b });
            }
            model.store.accumulate(&grads);
            adam_step(&mut model.store, &adam)?;
            epoch_loss += loss * groups.len() as f64;
            counted += groups.len();
        }

        let (val_loss, val_hr10, val_ndcg10) = if val.is_empty() {
            (0.0, 0.0, 0.0)
        } else {
            let report = evaluate(&ModelRanker::new(&model, rtim)?, &val)?;
            let loss = eval_loss(&model, &val_loss_groups, rtim)?;
            (loss, report.overall.hr[1], report.overall.ndcg[1])
        };
        let record = EpochRecord {
            epoch,
            train_loss: epoch_loss / counted.max(1) as f64,
            val_loss,
            val_hr10,
            val_ndcg10,
            wall_secs: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        history.push(record);

        if best.as_ref().map_or(true, |b| val_loss < b.0) {
            best = Some((val_loss, model.clone(), epoch));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= config.patience {
            break;
        }
    }
    let (_, model, best_epoch) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        best_epoch,
        history,
    })
}
