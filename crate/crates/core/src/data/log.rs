use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub type UserId = u32;
pub type ItemId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    pub user: UserId,
    pub item: ItemId,
    pub timestamp: i64,
}

/// One user's chronologically ordered interactions.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UserHistory {
    pub items: Vec<ItemId>,
    pub times: Vec<i64>,
}

impl UserHistory {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn prefix(&self, end: usize) -> UserHistory {
        UserHistory {
            items: self.items[..end].to_vec(),
            times: self.times[..end].to_vec(),
        }
    }
}

/// Time-ordered interactions with dense user and item vocabularies.
///
/// Dense ids start at 1; 0 is reserved for padding. `user_vocab[u - 1]` is
/// the raw identifier of dense user `u` (same for items).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionLog {
    users: Vec<UserHistory>,
    user_vocab: Vec<String>,
    item_vocab: Vec<String>,
}

impl InteractionLog {
    /// Builds a log from per-user histories, validating ordering, id ranges
    /// and vocabulary density.
    pub fn from_histories(
        users: Vec<UserHistory>,
        user_vocab: Vec<String>,
        item_vocab: Vec<String>,
    ) -> Result<Self> {
        if users.len() != user_vocab.len() {
            return Err(Error::Format(format!(
                "{} user histories but {} user vocabulary entries",
                users.len(),
                user_vocab.len()
            )));
        }
        let mut seen = vec![false; item_vocab.len() + 1];
        for (u, h) in users.iter().enumerate() {
            if h.items.len() != h.times.len() {
                return Err(Error::Format(format!("user {} has ragged history", u + 1)));
            }
            if h.is_empty() {
                return Err(Error::Format(format!("user {} has no events", u + 1)));
            }
            if h.times.windows(2).any(|w| w[0] > w[1]) {
                return Err(Error::Format(format!(
                    "user {} timestamps are not sorted",
                    u + 1
                )));
            }
            for &i in &h.items {
                if i == 0 || i as usize > item_vocab.len() {
                    return Err(Error::UnknownId {
                        kind: "item",
                        id: i as usize,
                    });
                }
                seen[i as usize] = true;
            }
        }
        if let Some(missing) = seen.iter().skip(1).position(|s| !s) {
            return Err(Error::Format(format!(
                "item vocabulary is not dense: item {} never occurs",
                missing + 1
            )));
        }
        Ok(Self {
            users,
            user_vocab,
            item_vocab,
        })
    }

    /// Builds a log from events with arbitrary numeric ids, densifying
    /// them in ascending order. Events are grouped per user and sorted by
    /// timestamp, stable on ties.
    pub fn from_raw_events(events: &[Event]) -> Result<Self> {
        if events.is_empty() {
            return Err(Error::Empty("no events".into()));
        }
        let rows = events
            .iter()
            .map(|e| (e.user.to_string(), e.item.to_string(), e.timestamp))
            .collect();
        from_rows(rows)
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_vocab.len()
    }

    pub fn num_events(&self) -> usize {
        self.users.iter().map(UserHistory::len).sum()
    }

    /// History of dense user `user` (1-based).
    pub fn user(&self, user: UserId) -> &UserHistory {
        &self.users[user as usize - 1]
    }

    pub fn histories(&self) -> &[UserHistory] {
        &self.users
    }

    /// `(dense user id, history)` pairs in id order.
    pub fn users(&self) -> impl Iterator<Item = (UserId, &UserHistory)> {
        self.users
            .iter()
            .enumerate()
            .map(|(i, h)| (i as UserId + 1, h))
    }

    pub fn events(&self) -> impl Iterator<Item = Event> + '_ {
        self.users().flat_map(|(u, h)| {
            h.items.iter().zip(&h.times).map(move |(&item, &timestamp)| Event {
                user: u,
                item,
                timestamp,
            })
        })
    }

    pub fn user_vocab(&self) -> &[String] {
        &self.user_vocab
    }

    pub fn item_vocab(&self) -> &[String] {
        &self.item_vocab
    }

    /// Writes `events.csv`, `users.tsv` and `items.tsv` into `dir`.
    pub fn save_dir(&self, dir: &Path, header: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_events(&dir.join("events.csv"), self, header)?;
        write_id_map(&dir.join("users.tsv"), &self.user_vocab, header)?;
        write_id_map(&dir.join("items.tsv"), &self.item_vocab, header)?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let dense = ingest(&dir.join("events.csv"), &ColumnSpec::default())?;
        let user_vocab = read_id_map(&dir.join("users.tsv"))?;
        let item_vocab = read_id_map(&dir.join("items.tsv"))?;
        if user_vocab.len() != dense.num_users() || item_vocab.len() != dense.num_items() {
            return Err(Error::Format(format!(
                "id maps in {} do not match events.csv",
                dir.display()
            )));
        }
        Self::from_histories(dense.users, user_vocab, item_vocab)
    }
}

/// A column chosen by header name or zero-based position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Column {
    Name(String),
    Index(usize),
}

impl std::str::FromStr for Column {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s.parse::<usize>() {
            Ok(i) => Column::Index(i),
            Err(_) => Column::Name(s.to_string()),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ColumnSpec {
    pub user: Column,
    pub item: Column,
    pub timestamp: Column,
    pub delimiter: char,
    pub has_header: bool,
}

impl Default for ColumnSpec {
    fn default() -> Self {
        Self {
            user: Column::Name("user_id".into()),
            item: Column::Name("item_id".into()),
            timestamp: Column::Name("timestamp".into()),
            delimiter: ',',
            has_header: true,
        }
    }
}

pub fn ingest(path: &Path, spec: &ColumnSpec) -> Result<InteractionLog> {
    let file = File::open(path)?;
    ingest_reader(BufReader::new(file), spec, path)
}

/// Parses delimited `(user, item, timestamp)` rows. Lines starting with `#`
/// and blank lines are skipped. Raw ids are densified in sorted order
/// (numeric when every id is an integer), so the result does not depend on
/// row order.
pub fn ingest_reader<R: BufRead>(
    reader: R,
    spec: &ColumnSpec,
    path: &Path,
) -> Result<InteractionLog> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: PathBuf::from(path),
        line,
        message,
    };
    let mut idx: Option<[usize; 3]> = None;
    if !spec.has_header {
        idx = Some(resolve_columns(spec, None).map_err(|m| parse_err(0, m))?);
    }
    let mut rows: Vec<(String, String, i64)> = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = n + 1;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(spec.delimiter).map(str::trim).collect();
        let Some(cols) = idx else {
            idx = Some(resolve_columns(spec, Some(&fields)).map_err(|m| parse_err(lineno, m))?);
            continue;
        };
        let get = |c: usize| {
            fields
                .get(c)
                .copied()
                .filter(|s| !s.is_empty())
                .ok_or_else(|| parse_err(lineno, format!("missing column {c}")))
        };
        let user = get(cols[0])?.to_string();
        let item = get(cols[1])?.to_string();
        let ts_raw = get(cols[2])?;
        let ts = ts_raw
            .parse::<i64>()
            .map_err(|_| parse_err(lineno, format!("bad timestamp `{ts_raw}`")))?;
        rows.push((user, item, ts));
    }
    if rows.is_empty() {
        return Err(Error::Empty(format!("{} has no interaction rows", path.display())));
    }

    from_rows(rows)
}

fn from_rows(rows: Vec<(String, String, i64)>) -> Result<InteractionLog> {
    let user_vocab = sorted_vocab(rows.iter().map(|r| r.0.as_str()));
    let item_vocab = sorted_vocab(rows.iter().map(|r| r.1.as_str()));
    let user_ids: HashMap<&str, u32> = index_of(&user_vocab);
    let item_ids: HashMap<&str, u32> = index_of(&item_vocab);

    let mut users = vec![UserHistory::default(); user_vocab.len()];
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by_key(|&i| (user_ids[rows[i].0.as_str()], rows[i].2));
    for i in order {
        let (u, it, ts) = &rows[i];
        let h = &mut users[user_ids[u.as_str()] as usize - 1];
        h.items.push(item_ids[it.as_str()]);
        h.times.push(*ts);
    }
    InteractionLog::from_histories(users, user_vocab, item_vocab)
}

fn resolve_columns(
    spec: &ColumnSpec,
    header: Option<&[&str]>,
) -> std::result::Result<[usize; 3], String> {
    let find = |c: &Column| match (c, header) {
        (Column::Index(i), _) => Ok(*i),
        (Column::Name(name), Some(h)) => h
            .iter()
            .position(|f| f == name)
            .ok_or_else(|| format!("header has no column `{name}`")),
        (Column::Name(name), None) => Err(format!(
            "column `{name}` given by name but the input has no header"
        )),
    };
    Ok([find(&spec.user)?, find(&spec.item)?, find(&spec.timestamp)?])
}

fn sorted_vocab<'a>(ids: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut v: Vec<String> = ids.map(str::to_string).collect();
    v.sort_unstable();
    v.dedup();
    if v.iter().all(|s| s.parse::<i64>().is_ok()) {
        v.sort_by_key(|s| s.parse::<i64>().expect("checked above"));
    }
    v
}

fn index_of(vocab: &[String]) -> HashMap<&str, u32> {
    vocab
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i as u32 + 1))
        .collect()
}

/// Dense events as `user_id,item_id,timestamp` CSV preceded by `header`
/// comment lines.
pub fn write_events(path: &Path, log: &InteractionLog, header: &str) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, header)?;
    writeln!(w, "user_id,item_id,timestamp")?;
    for e in log.events() {
        writeln!(w, "{},{},{}", e.user, e.item, e.timestamp)?;
    }
    w.flush()?;
    Ok(())
}

/// Two-column `raw<TAB>dense` table.
pub fn write_id_map(path: &Path, vocab: &[String], header: &str) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, header)?;
    for (i, raw) in vocab.iter().enumerate() {
        writeln!(w, "{raw}\t{}", i + 1)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_id_map(path: &Path) -> Result<Vec<String>> {
    let reader = BufReader::new(File::open(path)?);
    let mut vocab = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let (raw, dense) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: "expected two tab-separated columns".into(),
        })?;
        let dense: usize = dense.trim().parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: format!("bad dense id `{dense}`"),
        })?;
        if dense != vocab.len() + 1 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: format!("dense ids must be consecutive, got {dense}"),
            });
        }
        vocab.push(raw.to_string());
    }
    Ok(vocab)
}

pub(crate) fn write_header<W: Write>(w: &mut W, header: &str) -> std::io::Result<()> {
    for line in header.lines() {
        writeln!(w, "# {line}")?;
    }
    Ok(())
}
