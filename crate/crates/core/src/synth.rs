//! Synthetic logs with planted periodic repurchases and replayed item
//! blocks.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{Event, InteractionLog, ItemId, UserId};
use crate::error::{Error, Result};
use crate::numerics::derive_seed;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub users: usize,
    pub items: usize,
    pub events_per_user: usize,
    /// Items `1..=periodic_items` form the periodic set.
    pub periodic_items: usize,
    /// Periodic items assigned to each user.
    pub periodic_per_user: usize,
    /// Repurchase period in seconds of periodic item `p`:
    /// `periods[(p - 1) % periods.len()]`.
    pub periods: Vec<i64>,
    /// Each gap is `period + U{-jitter..=jitter}` seconds.
    pub jitter: i64,
    /// Length of the per-user item block replayed in order.
    pub block_len: usize,
    /// Probability that a non-periodic slot holds a uniform random item.
    pub noise: f64,
    /// Spacing of non-periodic events in seconds.
    pub slot: i64,
    pub start: i64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            users: 200,
            items: 50,
            events_per_user: 40,
            periodic_items: 10,
            periodic_per_user: 1,
            periods: vec![8 * 3600],
            jitter: 1,
            block_len: 4,
            noise: 0.1,
            slot: 3600,
            start: 1_600_000_000,
            seed: 13,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("users", self.users),
            ("items", self.items),
            ("events_per_user", self.events_per_user),
            ("periodic_items", self.periodic_items),
            ("periodic_per_user", self.periodic_per_user),
            ("block_len", self.block_len),
        ];
        for (k, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if self.periodic_per_user > self.periodic_items {
            return Err(Error::Config("periodic_per_user exceeds periodic_items".into()));
        }
        if self.periodic_items + self.block_len > self.items {
            return Err(Error::Config("periodic set and block do not fit in the item range".into()));
        }
        if self.periods.is_empty() || self.periods.iter().any(|&p| p <= 0) || self.slot <= 0 {
            return Err(Error::Config("periods and slot must be positive".into()));
        }
        if self.jitter < 0 || self.periods.iter().any(|&p| self.jitter >= p) {
            return Err(Error::Config("jitter must be non-negative and below every period".into()));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config(format!("noise must be in [0, 1], got {}", self.noise)));
        }
        Ok(())
    }

    pub fn period_of(&self, item: usize) -> i64 {
        self.periods[(item - 1) % self.periods.len()]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
        }
        match key {
            "users" => self.users = parse(key, value)?,
            "items" => self.items = parse(key, value)?,
            "events_per_user" => self.events_per_user = parse(key, value)?,
            "periodic_items" => self.periodic_items = parse(key, value)?,
            "periodic_per_user" => self.periodic_per_user = parse(key, value)?,
            "periods" => {
                self.periods = value.split(',').map(|p| parse(key, p)).collect::<Result<_>>()?;
            }
            "jitter" => self.jitter = parse(key, value)?,
            "block_len" => self.block_len = parse(key, value)?,
            "noise" => self.noise = parse(key, value)?,
            "slot" => self.slot = parse(key, value)?,
            "start" => self.start = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let periods: Vec<String> = self.periods.iter().map(|p| p.to_string()).collect();
        vec![
            ("users", self.users.to_string()),
            ("items", self.items.to_string()),
            ("events_per_user", self.events_per_user.to_string()),
            ("periodic_items", self.periodic_items.to_string()),
            ("periodic_per_user", self.periodic_per_user.to_string()),
            ("periods", periods.join(",")),
            ("jitter", self.jitter.to_string()),
            ("block_len", self.block_len.to_string()),
            ("noise", self.noise.to_string()),
            ("slot", self.slot.to_string()),
            ("start", self.start.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

/// A generated log with its planted ground truth in dense ids.
#[derive(Clone, Debug)]
pub struct SyntheticLog {
    pub log: InteractionLog,
    /// Periodic items of each user, indexed by `user - 1`.
    pub periodic: Vec<Vec<ItemId>>,
    /// Replayed block of each user, in play order.
    pub blocks: Vec<Vec<ItemId>>,
}

struct UserPlan {
    events: Vec<Event>,
    periodic: Vec<usize>,
    block: Vec<usize>,
}

fn generate_user(cfg: &SyntheticConfig, user: usize) -> UserPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[user as u64]));
    let mut periodic: Vec<usize> = sample(&mut rng, cfg.periodic_items, cfg.periodic_per_user)
        .into_iter()
        .map(|i| i + 1)
        .collect();
    periodic.sort_unstable();
    let others = cfg.items - cfg.periodic_items;
    let block: Vec<usize> = sample(&mut rng, others, cfg.block_len)
        .into_iter()
        .map(|i| cfg.periodic_items + 1 + i)
        .collect();

    // Next due time of each periodic item; phases fall on slot boundaries.
    let mut due: Vec<i64> = periodic
        .iter()
        .map(|&p| {
            let slots = (cfg.period_of(p) / cfg.slot).max(1);
            cfg.start + cfg.slot * rng.gen_range(0..slots)
        })
        .collect();
    let noise_pool: Vec<usize> = (1..=cfg.items).filter(|i| !periodic.contains(i)).collect();

    let mut events = Vec::with_capacity(cfg.events_per_user);
    let (mut slot, mut cursor, mut last) = (0i64, 0usize, i64::MIN);
    while events.len() < cfg.events_per_user {
        let filler_t = cfg.start + slot * cfg.slot + cfg.slot / 2;
        let (k, &next_due) = due.iter().enumerate().min_by_key(|&(_, t)| *t).expect("non-empty");
        let (item, t) = if next_due <= filler_t {
            let p = periodic[k];
            let gap = cfg.period_of(p) + rng.gen_range(-cfg.jitter..=cfg.jitter);
            due[k] = next_due + gap;
            (p, next_due)
        } else {
            slot += 1;
            let item = if rng.gen_bool(cfg.noise) {
                noise_pool[rng.gen_range(0..noise_pool.len())]
            } else {
                cursor += 1;
                block[(cursor - 1) % block.len()]
            };
            (item, filler_t)
        };
        let t = t.max(last + 1);
        last = t;
        events.push(Event {
            user: user as UserId,
            item: item as ItemId,
            timestamp: t,
        });
    }
    UserPlan {
        events,
        periodic,
        block,
    }
}

/// Generates the log. Each user draws from its own stream derived from
/// `(seed, user)`, so the result does not depend on scheduling.
pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticLog> {
    cfg.validate()?;
    let plans: Vec<UserPlan> = (1..=cfg.users).into_par_iter().map(|u| generate_user(cfg, u)).collect();
    let events: Vec<Event> = plans.iter().flat_map(|p| p.events.iter().copied()).collect();
    let log = InteractionLog::from_raw_events(&events)?;
    // Raw ids are numeric, but items that never occur are dropped from the
    // dense vocabulary.
    let dense: HashMap<&str, ItemId> = log
        .item_vocab()
        .iter()
        .enumerate()
        .map(|(k, raw)| (raw.as_str(), k as ItemId + 1))
        .collect();
    let map = |items: &[usize]| -> Vec<ItemId> {
        items.iter().filter_map(|i| dense.get(i.to_string().as_str()).copied()).collect()
    };
    Ok(SyntheticLog {
        periodic: plans.iter().map(|p| map(&p.periodic)).collect(),
        blocks: plans.iter().map(|p| map(&p.block)).collect(),
        log,
    })
}
