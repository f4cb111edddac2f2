use crate::data::{FeatureConfig, MatrixConfig};
use crate::error::{Error, Result};

/// Model, feature and training hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Embedding and representation width; must be even.
    pub d: usize,
    /// Behavior and last-repeat sequence length.
    pub seq_len: usize,
    /// Interval history width, also the repeat matrix width.
    pub history_len: usize,
    /// Rows of the repeat interval matrix (top-M users).
    pub matrix_rows: usize,
    /// Interval unit in seconds; 0 means "smallest repeat gap in the data".
    pub p_min: i64,
    pub bin_max: u32,
    pub conv_channels: usize,
    pub conv_widths: Vec<usize>,
    pub dropout: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// Random unseen items per training positive.
    pub train_negatives: usize,
    /// Previously consumed items (other than the target) per training
    /// positive, scored at the target time.
    pub repeat_negatives: usize,
    pub val_negatives: usize,
    pub test_negatives: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Train on every position from the second event, not only on
    /// positions with a full window.
    pub train_from_start: bool,
    /// Let the target interval attend to itself as well as the history.
    pub attend_target: bool,
    pub use_utrm: bool,
    pub use_itrm: bool,
    pub use_sram: bool,
    /// Positives per gradient work unit; fixes the summation order so
    /// results do not depend on the thread count.
    pub chunk_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 100,
            seq_len: 10,
            history_len: 10,
            matrix_rows: 10,
            p_min: 0,
            bin_max: 256,
            conv_channels: 8,
            conv_widths: vec![2, 3],
            dropout: 0.5,
            lr: 0.001,
            batch_size: 256,
            train_negatives: 3,
            repeat_negatives: 0,
            val_negatives: 3,
            test_negatives: 100,
            patience: 20,
            max_epochs: 200,
            seed: 42,
            train_from_start: true,
            attend_target: true,
            use_utrm: true,
            use_itrm: true,
            use_sram: true,
            chunk_size: 16,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean `{value}` for `{key}`"))),
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("seq_len", self.seq_len),
            ("history_len", self.history_len),
            ("matrix_rows", self.matrix_rows),
            ("conv_channels", self.conv_channels),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("chunk_size", self.chunk_size),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if self.d % 2 != 0 {
            return Err(Error::Config(format!("d must be even, got {}", self.d)));
        }
        if self.conv_widths.is_empty() || self.conv_widths.contains(&0) || self.conv_widths.len() > self.d {
            return Err(Error::Config("conv_widths must be non-empty positive widths".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if self.p_min < 0 || self.bin_max == 0 || self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::Config("p_min, bin_max and lr must be non-negative".into()));
        }
        if self.val_negatives == 0 || self.test_negatives == 0 {
            return Err(Error::Config("evaluation needs at least one negative".into()));
        }
        Ok(())
    }

    pub fn features(&self) -> FeatureConfig {
        FeatureConfig {
            seq_len: self.seq_len,
            history_len: self.history_len,
            p_min: self.p_min.max(1),
            bin_max: self.bin_max,
        }
    }

    pub fn matrix(&self) -> MatrixConfig {
        MatrixConfig {
            rows: self.matrix_rows,
            width: self.history_len,
            p_min: self.p_min.max(1),
            bin_max: self.bin_max,
        }
    }

    /// Sets one `key = value` entry. Returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "d" => self.d = parse(key, value)?,
            "seq_len" => self.seq_len = parse(key, value)?,
            "history_len" | "matrix_n" => self.history_len = parse(key, value)?,
            "matrix_rows" | "matrix_m" => self.matrix_rows = parse(key, value)?,
            "p_min" => self.p_min = parse(key, value)?,
            "bin_max" => self.bin_max = parse(key, value)?,
            "conv_channels" => self.conv_channels = parse(key, value)?,
            "conv_widths" => {
                self.conv_widths = value
                    .split(',')
                    .map(|w| parse(key, w))
                    .collect::<Result<_>>()?
            }
            "dropout" => self.dropout = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "train_negatives" => self.train_negatives = parse(key, value)?,
            "repeat_negatives" => self.repeat_negatives = parse(key, value)?,
            "val_negatives" => self.val_negatives = parse(key, value)?,
            "test_negatives" => self.test_negatives = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "train_from_start" => self.train_from_start = parse_bool(key, value)?,
            "attend_target" => self.attend_target = parse_bool(key, value)?,
            "use_utrm" => self.use_utrm = parse_bool(key, value)?,
            "use_itrm" => self.use_itrm = parse_bool(key, value)?,
            "use_sram" => self.use_sram = parse_bool(key, value)?,
            "chunk_size" => self.chunk_size = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Every entry in a stable order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let widths: Vec<String> = self.conv_widths.iter().map(|w| w.to_string()).collect();
        vec![
            ("d", self.d.to_string()),
            ("seq_len", self.seq_len.to_string()),
            ("history_len", self.history_len.to_string()),
            ("matrix_rows", self.matrix_rows.to_string()),
            ("p_min", self.p_min.to_string()),
            ("bin_max", self.bin_max.to_string()),
            ("conv_channels", self.conv_channels.to_string()),
            ("conv_widths", widths.join(",")),
            ("dropout", self.dropout.to_string()),
            ("lr", self.lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("train_negatives", self.train_negatives.to_string()),
            ("repeat_negatives", self.repeat_negatives.to_string()),
            ("val_negatives", self.val_negatives.to_string()),
            ("test_negatives", self.test_negatives.to_string()),
            ("patience", self.patience.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("train_from_start", self.train_from_start.to_string()),
            ("attend_target", self.attend_target.to_string()),
            ("use_utrm", self.use_utrm.to_string()),
            ("use_itrm", self.use_itrm.to_string()),
            ("use_sram", self.use_sram.to_string()),
            ("chunk_size", self.chunk_size.to_string()),
        ]
    }
}
