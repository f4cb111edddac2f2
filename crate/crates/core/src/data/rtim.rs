use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::features::discretize_intervals;
use super::log::{write_header, ItemId, UserHistory, UserId};
use crate::error::{Error, Result};

/// Discretised repeat gaps of an item's heaviest repeat consumers.
///
/// Row `r` belongs to `user_ids[r]`; each row holds that user's most recent
/// `width` gaps for the item, left-padded with bin 0 and masked.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RepeatIntervalMatrix {
    pub grid: Vec<Vec<u32>>,
    pub user_ids: Vec<UserId>,
    pub mask: Vec<Vec<bool>>,
    pub width: usize,
}

impl RepeatIntervalMatrix {
    pub fn empty(width: usize) -> Self {
        Self {
            grid: Vec::new(),
            user_ids: Vec::new(),
            mask: Vec::new(),
            width,
        }
    }

    pub fn rows(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// Row-major flattened mask.
    pub fn flat_mask(&self) -> Vec<bool> {
        self.mask.iter().flatten().copied().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatrixConfig {
    /// Maximum number of rows (top-M users).
    pub rows: usize,
    /// Row width `n`.
    pub width: usize,
    pub p_min: i64,
    pub bin_max: u32,
}

fn matrix_from_rows(mut rows: Vec<(UserId, Vec<i64>)>, cfg: &MatrixConfig) -> RepeatIntervalMatrix {
    rows.retain(|(_, ts)| ts.len() >= 2);
    // Most repeats first, then ascending user id.
    rows.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));
    rows.truncate(cfg.rows);
    let mut m = RepeatIntervalMatrix::empty(cfg.width);
    for (u, ts) in rows {
        let row = discretize_intervals(&ts, cfg.p_min, cfg.bin_max).fit(cfg.width);
        m.mask.push(row.mask());
        m.grid.push(row.bins);
        m.user_ids.push(u);
    }
    m
}

/// Matrix for one item from the given (user, history) pairs. Callers pass
/// training histories only.
pub fn build_repeat_interval_matrix<'a>(
    histories: impl IntoIterator<Item = (UserId, &'a UserHistory)>,
    item: ItemId,
    cfg: &MatrixConfig,
) -> RepeatIntervalMatrix {
    let rows = histories
        .into_iter()
        .map(|(u, h)| {
            let ts: Vec<i64> = h
                .items
                .iter()
                .zip(&h.times)
                .filter(|(&i, _)| i == item)
                .map(|(_, &t)| t)
                .collect();
            (u, ts)
        })
        .collect();
    matrix_from_rows(rows, cfg)
}

/// Matrices of every item, built once from training histories.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RtimCache {
    pub config: MatrixConfig,
    /// Index 0 is the padding item and always empty.
    matrices: Vec<RepeatIntervalMatrix>,
}

impl RtimCache {
    /// `histories[u - 1]` is the training history of user `u`.
    pub fn build(histories: &[UserHistory], num_items: usize, cfg: MatrixConfig) -> Self {
        let mut per_item: Vec<Vec<(UserId, Vec<i64>)>> = vec![Vec::new(); num_items + 1];
        for (idx, h) in histories.iter().enumerate() {
            let mut times: HashMap<ItemId, Vec<i64>> = HashMap::new();
            for (&i, &t) in h.items.iter().zip(&h.times) {
                times.entry(i).or_default().push(t);
            }
            for (i, ts) in times {
                if ts.len() >= 2 && (i as usize) <= num_items {
                    per_item[i as usize].push((idx as UserId + 1, ts));
                }
            }
        }
        let matrices = per_item.into_iter().map(|rows| matrix_from_rows(rows, &cfg)).collect();
        Self {
            config: cfg,
            matrices,
        }
    }

    pub fn num_items(&self) -> usize {
        self.matrices.len() - 1
    }

    pub fn get(&self, item: ItemId) -> Result<&RepeatIntervalMatrix> {
        self.matrices.get(item as usize).ok_or(Error::UnknownId {
            kind: "item",
            id: item as usize,
        })
    }

    /// Text format: a `config` line, then one line per matrix row:
    /// `item<TAB>user<TAB>cells` with masked cells written as `-`.
    pub fn save(&self, path: &Path, header: &str) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        write_header(&mut w, header)?;
        let c = &self.config;
        writeln!(
            w,
            "config\t{}\t{}\t{}\t{}\t{}",
            self.num_items(),
            c.rows,
            c.width,
            c.p_min,
            c.bin_max
        )?;
        for (item, m) in self.matrices.iter().enumerate() {
            for r in 0..m.rows() {
                let cells: Vec<String> = m.grid[r]
                    .iter()
                    .zip(&m.mask[r])
                    .map(|(b, &v)| if v { b.to_string() } else { "-".into() })
                    .collect();
                writeln!(w, "{item}\t{}\t{}", m.user_ids[r], cells.join(","))?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut cache: Option<RtimCache> = None;
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let lno = idx + 1;
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields[0] == "config" {
                let nums: Vec<i64> = fields[1..]
                    .iter()
                    .map(|f| f.parse::<i64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| err(lno, e.to_string()))?;
                if nums.len() != 5 || nums.iter().any(|&x| x < 0) {
                    return Err(err(lno, "bad config line".into()));
                }
                let config = MatrixConfig {
                    rows: nums[1] as usize,
                    width: nums[2] as usize,
                    p_min: nums[3],
                    bin_max: nums[4] as u32,
                };
                cache = Some(RtimCache {
                    config,
                    matrices: vec![RepeatIntervalMatrix::empty(config.width); nums[0] as usize + 1],
                });
                continue;
            }
            let cache = cache
                .as_mut()
                .ok_or_else(|| err(lno, "matrix row before config line".into()))?;
            if fields.len() != 3 {
                return Err(err(lno, format!("expected 3 fields, got {}", fields.len())));
            }
            let item: usize = fields[0].parse().map_err(|_| err(lno, "bad item id".into()))?;
            let user: UserId = fields[1].parse().map_err(|_| err(lno, "bad user id".into()))?;
            let mut row = Vec::new();
            let mut mask = Vec::new();
            for cell in fields[2].split(',') {
                if cell == "-" {
                    row.push(0);
                    mask.push(false);
                } else {
                    row.push(cell.parse().map_err(|_| err(lno, format!("bad cell `{cell}`")))?);
                    mask.push(true);
                }
            }
            if row.len() != cache.config.width {
                return Err(err(lno, "row width does not match config".into()));
            }
            let m = cache
                .matrices
                .get_mut(item)
                .ok_or_else(|| err(lno, format!("item {item} out of range")))?;
            m.grid.push(row);
            m.mask.push(mask);
            m.user_ids.push(user);
        }
        cache.ok_or_else(|| Error::Empty(format!("{}: no config line", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};

    fn cfg(rows: usize, width: usize, p_min: i64) -> MatrixConfig {
        MatrixConfig {
            rows,
            width,
            p_min,
            bin_max: 256,
        }
    }

    #[test]
    fn single_user_example() {
        let h = UserHistory {
            items: vec![3, 3, 3],
            times: vec![0, 100, 250],
        };
        let m = build_repeat_interval_matrix([(1, &h)], 3, &cfg(10, 4, 50));
        assert_eq!(m.grid, vec![vec![0, 0, 2, 3]]);
        assert_eq!(m.mask, vec![vec![false, false, true, true]]);
    }

    #[test]
    fn no_repeats_gives_empty_matrix() {
        let h = UserHistory {
            items: vec![1, 2],
            times: vec![0, 1],
        };
        assert!(build_repeat_interval_matrix([(1, &h)], 1, &cfg(10, 4, 1)).is_empty());
    }

    fn naive(hs: &[(UserId, UserHistory)], item: ItemId, c: &MatrixConfig) -> RepeatIntervalMatrix {
        let mut cands: Vec<(usize, UserId, Vec<i64>)> = Vec::new();
        for (u, h) in hs {
            let mut ts = vec![];
            for k in 0..h.len() {
                if h.items[k] == item {
                    ts.push(h.times[k]);
                }
            }
            if ts.len() > 1 {
                cands.push((ts.len() - 1, *u, ts));
            }
        }
        // Bubble sort by (freq desc, id asc).
        for a in 0..cands.len() {
            for b in 0..cands.len() - 1 - a {
                let swap = cands[b].0 < cands[b + 1].0
                    || (cands[b].0 == cands[b + 1].0 && cands[b].1 > cands[b + 1].1);
                if swap {
                    cands.swap(b, b + 1);
                }
            }
        }
        let mut m = RepeatIntervalMatrix::empty(c.width);
        for (_, u, ts) in cands.into_iter().take(c.rows) {
            let gaps: Vec<u32> = ts.windows(2).map(|w| (((w[1] - w[0]) / c.p_min) as u32).min(c.bin_max)).collect();
            let keep = gaps.len().min(c.width);
            let mut row = vec![0; c.width - keep];
            row.extend_from_slice(&gaps[gaps.len() - keep..]);
            let mask = (0..c.width).map(|k| k >= c.width - keep).collect();
            m.grid.push(row);
            m.mask.push(mask);
            m.user_ids.push(u);
        }
        m
    }

    fn random_histories(rng: &mut impl Rng) -> Vec<(UserId, UserHistory)> {
        (1..=rng.gen_range(1..6))
            .map(|u| {
                let n = rng.gen_range(1..12);
                let mut t = 0;
                let mut h = UserHistory::default();
                for _ in 0..n {
                    t += rng.gen_range(0..40);
                    h.items.push(rng.gen_range(1..4));
                    h.times.push(t);
                }
                (u, h)
            })
            .collect()
    }

    #[test]
    fn matches_brute_force_sort() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let hs = random_histories(&mut rng);
            let c = cfg(rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..9));
            let got = build_repeat_interval_matrix(hs.iter().map(|(u, h)| (*u, h)), 2, &c);
            assert_eq!(got, naive(&hs, 2, &c));
        }
    }

    #[test]
    fn three_users_top_two() {
        let mk = |n: usize| UserHistory {
            items: vec![5; n],
            times: (0..n as i64).map(|k| k * 10).collect(),
        };
        let hs = [(1, mk(3)), (2, mk(4)), (3, mk(3))];
        let m = build_repeat_interval_matrix(hs.iter().map(|(u, h)| (*u, h)), 5, &cfg(2, 3, 10));
        assert_eq!(m.user_ids, vec![2, 1]);
    }

    #[test]
    fn rows_ignore_input_user_order() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let mut hs = random_histories(&mut rng);
            let c = cfg(3, 4, 3);
            let a = build_repeat_interval_matrix(hs.iter().map(|(u, h)| (*u, h)), 1, &c);
            hs.shuffle(&mut rng);
            let b = build_repeat_interval_matrix(hs.iter().map(|(u, h)| (*u, h)), 1, &c);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn cache_matches_per_item_builds_and_round_trips() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let hs = random_histories(&mut rng);
        let histories: Vec<UserHistory> = hs.iter().map(|(_, h)| h.clone()).collect();
        let c = cfg(2, 3, 4);
        let cache = RtimCache::build(&histories, 3, c);
        for item in 1..=3 {
            let direct = build_repeat_interval_matrix(hs.iter().map(|(u, h)| (*u, h)), item, &c);
            assert_eq!(cache.get(item).unwrap(), &direct);
        }
        assert!(cache.get(9).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rtim.tsv");
        cache.save(&p, "test").unwrap();
        assert_eq!(RtimCache::load(&p).unwrap(), cache);
    }
}
