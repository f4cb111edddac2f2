//! Instance files: one tab-separated line per instance with columns
//! `user item position timestamp target label behavior last_repeat history`.
//!
//! `target` is a bin number or `NEW`. Each sequence column is written as
//! `content_len|v1,v2,...` over the full padded width.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::features::{FixedSequence, IntervalSequence, TargetInterval, TrainingInstance};
use super::log::write_header;
use crate::error::{Error, Result};

pub const INSTANCE_COLUMNS: &str =
    "user\titem\tposition\ttimestamp\ttarget\tlabel\tbehavior\tlast_repeat\thistory";

fn seq_field<T: ToString>(content_len: usize, values: &[T]) -> String {
    let vals: Vec<String> = values.iter().map(|v| v.to_string()).collect();
    format!("{content_len}|{}", vals.join(","))
}

fn parse_seq(field: &str) -> std::result::Result<(usize, Vec<u32>), String> {
    let (len, vals) = field
        .split_once('|')
        .ok_or_else(|| format!("sequence `{field}` lacks `|`"))?;
    let len: usize = len.parse().map_err(|_| format!("bad content length `{len}`"))?;
    let vals: Vec<u32> = vals
        .split(',')
        .map(|v| v.parse::<u32>().map_err(|_| format!("bad value `{v}`")))
        .collect::<std::result::Result<_, _>>()?;
    if len > vals.len() {
        return Err(format!("content length {len} exceeds width {}", vals.len()));
    }
    Ok((len, vals))
}

pub fn write_instances<W: Write>(mut w: W, instances: &[TrainingInstance]) -> Result<()> {
    writeln!(w, "{INSTANCE_COLUMNS}")?;
    for x in instances {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            x.user,
            x.target_item,
            x.position,
            x.timestamp,
            x.target_interval,
            x.label,
            seq_field(x.behavior_seq.content_len, &x.behavior_seq.ids),
            seq_field(x.last_repeat_seq.content_len, &x.last_repeat_seq.ids),
            seq_field(x.history_intervals.content_len, &x.history_intervals.bins),
        )?;
    }
    Ok(())
}

pub fn save_instances(path: &Path, instances: &[TrainingInstance], header: &str) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_header(&mut w, header)?;
    write_instances(&mut w, instances)?;
    w.flush()?;
    Ok(())
}

pub fn load_instances(path: &Path) -> Result<Vec<TrainingInstance>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    read_instances(r).map_err(|e| match e {
        Error::Parse { line, message, .. } => Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        },
        other => other,
    })
}

pub fn read_instances<R: BufRead>(r: R) -> Result<Vec<TrainingInstance>> {
    let mut out = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let line = line?;
        let lno = idx + 1;
        if line.starts_with('#') || line.trim().is_empty() || line == INSTANCE_COLUMNS {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: Default::default(),
            line: lno,
            message,
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 9 {
            return Err(err(format!("expected 9 columns, got {}", f.len())));
        }
        let num = |s: &str, what: &str| s.parse::<i64>().map_err(|_| err(format!("bad {what} `{s}`")));
        let target = if f[4] == "NEW" {
            TargetInterval::New
        } else {
            TargetInterval::Bin(num(f[4], "target")? as u32)
        };
        let (bl, b) = parse_seq(f[6]).map_err(err)?;
        let (ll, l) = parse_seq(f[7]).map_err(err)?;
        let (hl, h) = parse_seq(f[8]).map_err(err)?;
        let label = num(f[5], "label")?;
        if label != 0 && label != 1 {
            return Err(err(format!("label must be 0 or 1, got {label}")));
        }
        out.push(TrainingInstance {
            user: num(f[0], "user")? as u32,
            target_item: num(f[1], "item")? as u32,
            position: num(f[2], "position")? as usize,
            timestamp: num(f[3], "timestamp")?,
            target_interval: target,
            label: label as u8,
            behavior_seq: FixedSequence {
                ids: b,
                content_len: bl,
            },
            last_repeat_seq: FixedSequence {
                ids: l,
                content_len: ll,
            },
            history_intervals: IntervalSequence {
                bins: h,
                content_len: hl,
            },
        });
    }
    Ok(out)
}
