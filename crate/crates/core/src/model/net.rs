use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::data::{ItemId, RtimCache, TrainingInstance};
use crate::error::{Error, Result};
use crate::itrm::{itrm_forward, ItrmParams};
use crate::layers::{maybe_dropout, Dropout, Mlp};
use crate::numerics::{logistic, ParamId, ParameterStore, Tape, Tensor, Var};
use crate::sram::{sram_forward, SramParams};
use crate::utrm::{utrm_forward, UtrmParams};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetParams {
    pub item_emb: ParamId,
    pub user_emb: ParamId,
    pub interval_emb: ParamId,
    pub utrm: UtrmParams,
    pub itrm: ItrmParams,
    pub sram: SramParams,
    pub fusion: Mlp,
}

impl NetParams {
    fn lookup(store: &ParameterStore, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            item_emb: store.id("emb.item")?,
            user_emb: store.id("emb.user")?,
            interval_emb: store.id("emb.interval")?,
            utrm: UtrmParams::lookup(store)?,
            itrm: ItrmParams::lookup(store)?,
            sram: SramParams::lookup(store, cfg.conv_widths.len())?,
            fusion: Mlp::lookup(store, "fusion", 2)?,
        })
    }
}

/// The full recommender: embeddings, the three temporal/sequential
/// modules, fusion MLP, and dot-product scoring.
#[derive(Clone, Debug)]
pub struct TsRec {
    pub config: ModelConfig,
    pub store: ParameterStore,
    pub params: NetParams,
    pub num_users: usize,
    pub num_items: usize,
}

/// Per-tape memo of outputs that depend only on the item or on nothing.
#[derive(Default)]
pub struct TapeCache<'f> {
    itrm: HashMap<ItemId, Var>,
    empty_sram: Option<Var>,
    frozen: Option<&'f FrozenParts>,
}

impl<'f> TapeCache<'f> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_frozen(frozen: &'f FrozenParts) -> Self {
        Self {
            frozen: Some(frozen),
            ..Default::default()
        }
    }
}

/// Precomputed constant parts for inference with fixed parameters.
#[derive(Clone, Debug)]
pub struct FrozenParts {
    itrm: Vec<Tensor>,
    empty_sram: Tensor,
}

impl TsRec {
    pub fn new(config: ModelConfig, num_users: usize, num_items: usize) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParameterStore::new();
        let item_emb = store.add_padded_table("emb.item", num_items + 1, d, &mut rng);
        let user_emb = store.add_glorot("emb.user", &[num_users + 1, d], &mut rng);
        let interval_emb = store.add_glorot("emb.interval", &[config.bin_max as usize + 2, d], &mut rng);
        let utrm = UtrmParams::register(&mut store, d, &mut rng);
        let itrm = ItrmParams::register(&mut store, d, config.conv_channels, &mut rng);
        let sram = SramParams::register(&mut store, d, config.seq_len, &config.conv_widths, &mut rng);
        let fusion = Mlp::register(&mut store, "fusion", &[4 * d, d, d], &mut rng);
        Ok(Self {
            params: NetParams {
                item_emb,
                user_emb,
                interval_emb,
                utrm,
                itrm,
                sram,
                fusion,
            },
            config,
            store,
            num_users,
            num_items,
        })
    }

    /// Rebuilds a model around an existing parameter store.
    pub fn from_store(config: ModelConfig, store: ParameterStore) -> Result<Self> {
        config.validate()?;
        let params = NetParams::lookup(&store, &config)?;
        let num_items = store.value(params.item_emb).shape()[0] - 1;
        let num_users = store.value(params.user_emb).shape()[0] - 1;
        // Shapes must agree with the configuration.
        let template = TsRec::new(config.clone(), num_users, num_items)?;
        for id in template.store.ids() {
            let name = template.store.name(id);
            let got = store.value(store.id(name)?).shape();
            if got != template.store.value(id).shape() {
                return Err(Error::shape("checkpoint", template.store.value(id).shape(), got));
            }
        }
        let mut store = store;
        store.copy_padding_flags(&template.store);
        Ok(Self {
            config,
            store,
            params,
            num_users,
            num_items,
        })
    }

    fn check_ids(&self, inst: &TrainingInstance) -> Result<()> {
        if inst.user == 0 || inst.user as usize > self.num_users {
            return Err(Error::UnknownId {
                kind: "user",
                id: inst.user as usize,
            });
        }
        let seqs = inst.behavior_seq.ids.iter().chain(&inst.last_repeat_seq.ids);
        for &i in seqs.chain(std::iter::once(&inst.target_item)) {
            if i as usize > self.num_items {
                return Err(Error::UnknownId {
                    kind: "item",
                    id: i as usize,
                });
            }
        }
        Ok(())
    }

    fn vector(tape: &mut Tape<'_>, table: ParamId, row: usize) -> Result<Var> {
        let v = tape.gather(table, &[row])?;
        let d = tape.value(v).len();
        tape.reshape(v, &[d])
    }

    fn item_repr(
        &self,
        tape: &mut Tape<'_>,
        item: ItemId,
        rtim: &RtimCache,
        drop: Option<&mut Dropout>,
    ) -> Result<Var> {
        let m = rtim.get(item)?;
        let d = self.config.d;
        let cells = if m.is_empty() {
            tape.zeros(&[0, m.width, d])
        } else {
            let ids: Vec<usize> = m.grid.iter().flatten().map(|&b| b as usize).collect();
            let e = tape.gather(self.params.interval_emb, &ids)?;
            tape.reshape(e, &[m.rows(), m.width, d])?
        };
        itrm_forward(tape, cells, &m.flat_mask(), &self.params.itrm, drop)
    }

    fn empty_sequence_repr(&self, tape: &mut Tape<'_>, drop: Option<&mut Dropout>) -> Result<Var> {
        let l = self.config.seq_len;
        let e = tape.zeros(&[l, self.config.d]);
        let mask = vec![false; l];
        sram_forward(tape, e, &mask, e, &mask, &self.params.sram, drop)
    }

    /// Constant parts for repeated inference with these parameters.
    pub fn freeze(&self, rtim: &RtimCache) -> Result<FrozenParts> {
        let mut itrm = Vec::with_capacity(self.num_items + 1);
        for item in 0..=self.num_items as ItemId {
            let mut tape = Tape::new(&self.store);
            let v = self.item_repr(&mut tape, item, rtim, None)?;
            itrm.push(tape.value(v).clone());
        }
        let mut tape = Tape::new(&self.store);
        let v = self.empty_sequence_repr(&mut tape, None)?;
        Ok(FrozenParts {
            itrm,
            empty_sram: tape.value(v).clone(),
        })
    }

    /// Pre-sigmoid score of one instance.
    pub fn logit(
        &self,
        tape: &mut Tape<'_>,
        inst: &TrainingInstance,
        rtim: &RtimCache,
        cache: &mut TapeCache<'_>,
        mut drop: Option<&mut Dropout>,
    ) -> Result<Var> {
        self.check_ids(inst)?;
        let cfg = &self.config;
        let d = cfg.d;
        let p = &self.params;

        let e_u = Self::vector(tape, p.user_emb, inst.user as usize)?;
        let e_u = maybe_dropout(tape, e_u, drop.as_deref_mut());
        let e_v = Self::vector(tape, p.item_emb, inst.target_item as usize)?;

        let o_ut = if cfg.use_utrm && !inst.target_interval.is_new() {
            let e_t = Self::vector(tape, p.interval_emb, inst.target_interval.embedding_row(cfg.bin_max))?;
            let rows: Vec<usize> = inst.history_intervals.bins.iter().map(|&b| b.min(cfg.bin_max) as usize).collect();
            let e_h = tape.gather(p.interval_emb, &rows)?;
            utrm_forward(tape, e_t, e_h, &inst.history_intervals.mask(), &p.utrm, cfg.attend_target)?
        } else {
            tape.zeros(&[d])
        };

        let o_it = if !cfg.use_itrm {
            tape.zeros(&[d])
        } else if let Some(&v) = cache.itrm.get(&inst.target_item) {
            v
        } else {
            let v = match cache.frozen {
                Some(f) => tape.input(f.itrm[inst.target_item as usize].clone()),
                None => self.item_repr(tape, inst.target_item, rtim, drop.as_deref_mut())?,
            };
            cache.itrm.insert(inst.target_item, v);
            v
        };

        let empty = inst.behavior_seq.content_len == 0 && inst.last_repeat_seq.content_len == 0;
        let o_sr = if !cfg.use_sram {
            tape.zeros(&[d])
        } else if empty {
            match cache.empty_sram {
                Some(v) => v,
                None => {
                    let v = match cache.frozen {
                        Some(f) => tape.input(f.empty_sram.clone()),
                        None => self.empty_sequence_repr(tape, drop.as_deref_mut())?,
                    };
                    cache.empty_sram = Some(v);
                    v
                }
            }
        } else {
            let to_rows = |ids: &[ItemId]| ids.iter().map(|&i| i as usize).collect::<Vec<_>>();
            let e_b = tape.gather(p.item_emb, &to_rows(&inst.behavior_seq.ids))?;
            let e_b = maybe_dropout(tape, e_b, drop.as_deref_mut());
            let e_l = tape.gather(p.item_emb, &to_rows(&inst.last_repeat_seq.ids))?;
            let e_l = maybe_dropout(tape, e_l, drop.as_deref_mut());
            sram_forward(
                tape,
                e_b,
                &inst.behavior_seq.mask(),
                e_l,
                &inst.last_repeat_seq.mask(),
                &p.sram,
                drop.as_deref_mut(),
            )?
        };

        let fused_in = tape.concat(&[o_ut, o_it, o_sr, e_u])?;
        let o = p.fusion.forward(tape, fused_in, drop)?;
        tape.dot(o, e_v)
    }

    /// Probability `sigmoid(o · e_v)` for one instance.
    pub fn score(&self, inst: &TrainingInstance, rtim: &RtimCache) -> Result<f64> {
        let mut tape = Tape::new(&self.store);
        let l = self.logit(&mut tape, inst, rtim, &mut TapeCache::new(), None)?;
        Ok(logistic(tape.value(l).item()))
    }

    /// Scores of many instances sharing one tape and `frozen` parts.
    pub fn score_many(&self, insts: &[TrainingInstance], rtim: &RtimCache, frozen: &FrozenParts) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.store);
        let mut cache = TapeCache::with_frozen(frozen);
        insts
            .iter()
            .map(|inst| {
                let l = self.logit(&mut tape, inst, rtim, &mut cache, None)?;
                Ok(logistic(tape.value(l).item()))
            })
            .collect()
    }
}

/// Labelled instances scored together: one positive and its negatives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScoredGroup {
    pub positive: TrainingInstance,
    pub negatives: Vec<TrainingInstance>,
}

/// Summed cross-entropy of all instances in `groups`, divided by
/// `normalizer` (the number of positives in the full batch).
pub fn groups_loss(
    model: &TsRec,
    tape: &mut Tape<'_>,
    groups: &[ScoredGroup],
    rtim: &RtimCache,
    normalizer: usize,
    mut drop: Option<&mut Dropout>,
) -> Result<Var> {
    let mut cache = TapeCache::new();
    let mut terms = Vec::new();
    for g in groups {
        if g.negatives.is_empty() {
            return Err(Error::Config("every positive needs at least one negative".into()));
        }
        for inst in std::iter::once(&g.positive).chain(&g.negatives) {
            let l = model.logit(tape, inst, rtim, &mut cache, drop.as_deref_mut())?;
            terms.push(tape.bce_with_logit(l, inst.label as f64)?);
        }
    }
    let total = tape.add_n(&terms)?;
    Ok(tape.scale(total, 1.0 / normalizer.max(1) as f64))
}

/// Mean-per-positive cross-entropy of a batch.
pub fn batch_loss(model: &TsRec, groups: &[ScoredGroup], rtim: &RtimCache) -> Result<f64> {
    let mut tape = Tape::new(&model.store);
    let l = groups_loss(model, &mut tape, groups, rtim, groups.len(), None)?;
    Ok(tape.value(l).item())
}
