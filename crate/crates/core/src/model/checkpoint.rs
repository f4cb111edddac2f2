use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::config::ModelConfig;
use super::net::TsRec;
use crate::data::write_header;
use crate::error::{Error, Result};
use crate::numerics::ParameterStore;

const CONFIG_END: &str = "end_config";

/// Writes `# header` lines, the configuration as `key=value` lines, then
/// the binary parameter store (values and optimizer state).
pub fn write_checkpoint<W: Write>(mut w: W, model: &TsRec, header: &str) -> Result<()> {
    write_header(&mut w, header)?;
    for (k, v) in model.config.entries() {
        writeln!(w, "{k}={v}")?;
    }
    writeln!(w, "{CONFIG_END}")?;
    model.store.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(mut r: R) -> Result<TsRec> {
    let mut config = ModelConfig::default();
    let mut line = String::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Format("checkpoint ends before the parameters".into()));
        }
        let l = line.trim_end();
        if l.starts_with('#') {
            continue;
        }
        if l == CONFIG_END {
            break;
        }
        let (k, v) = l
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad checkpoint config line `{l}`")))?;
        if !config.set(k, v)? {
            return Err(Error::Format(format!("unknown checkpoint config key `{k}`")));
        }
    }
    let store = ParameterStore::read_from(&mut r)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format("trailing bytes after checkpoint parameters".into()));
    }
    TsRec::from_store(config, store)
}

pub fn save_checkpoint(path: &Path, model: &TsRec, header: &str) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), model, header)
}

pub fn load_checkpoint(path: &Path) -> Result<TsRec> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
