//! Run configuration: model, data and generator settings read from a
//! `key = value` file and overridden by flags.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::parse_fractions;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synth::SyntheticConfig;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Keys prefixed with `synth.`.
    pub synth: SyntheticConfig,
    /// Items with fewer interactions are dropped before splitting.
    pub min_item_count: usize,
    /// Train, validation and test fractions of every user's events.
    pub split: (f64, f64, f64),
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            synth: SyntheticConfig::default(),
            min_item_count: 0,
            split: (0.7, 0.1, 0.2),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let known = match key {
            "min_item_count" => {
                self.min_item_count = value
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))?;
                true
            }
            "split" => {
                self.split = parse_fractions(value)?;
                true
            }
            _ => match key.strip_prefix("synth.") {
                Some(k) => self.synth.set(k, value)?,
                None => self.model.set(key, value)?,
            },
        };
        if known {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown configuration key `{key}`")))
        }
    }

    /// Applies every `key = value` line of `text`; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: origin.to_path_buf(),
                line: idx + 1,
                message,
            };
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            self.set(k.trim(), v.trim()).map_err(|e| err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.apply_text(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.synth.validate()
    }

    /// Every setting in a stable order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let (a, b, c) = self.split;
        let mut out = vec![
            ("min_item_count".to_string(), self.min_item_count.to_string()),
            ("split".to_string(), format!("{a},{b},{c}")),
        ];
        out.extend(self.model.entries().into_iter().map(|(k, v)| (k.to_string(), v)));
        out.extend(self.synth.entries().into_iter().map(|(k, v)| (format!("synth.{k}"), v)));
        out
    }

    /// Text that [`RunConfig::apply_text`] reads back to the same value.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// First 16 hex digits of the SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Header line carried by every artifact.
    pub fn header(&self, seed: u64) -> String {
        format!("tsrec {VERSION} config_hash={} seed={seed}", self.hash())
    }
}
