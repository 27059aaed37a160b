//! Line-oriented `key = value` run configuration.
//!
//! Blank lines and text after `#` are ignored. Every key is optional and
//! unknown keys are rejected, so a typo never silently falls back to a
//! default.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{KsttError, Result};
use crate::time_enc::TimeEncoderKind;
use crate::training::{ModelConfig, TrainConfig};

/// Every recognised key with a one-line description, in reference order.
pub const KEYS: &[(&str, &str)] = &[
    ("sessions_path", "sessions CSV (session_id,timestamp,item_id)"),
    ("attributes_path", "attributes CSV (item_id,attribute_type,attribute_value); empty for none"),
    ("use_attributes", "add item-attribute edges to the graph"),
    ("test_fraction", "share of the time span, counted back from the latest session start, held out for testing"),
    ("dim", "embedding width d, shared by every module"),
    ("gcn_layers", "number of graph convolution layers"),
    ("leaky_slope", "negative slope of the GCN LeakyReLU"),
    ("dropout", "dropout ratio on GCN inputs and transformer sub-blocks during training"),
    ("time_encoder", "none, tbe, t2v or mte"),
    ("tbe_buckets", "number of log2 time buckets"),
    ("mte_frequencies", "number of MTE base frequencies k"),
    ("mte_harmonics", "MTE harmonics J per frequency; empty derives it from dim = k(2J+1)"),
    ("layers", "transformer layers"),
    ("heads", "attention heads; must divide dim"),
    ("ffn_dim", "inner width of the feed-forward block; empty means 4 * dim"),
    ("readout", "session representation: last or mean"),
    ("epochs", "training epochs"),
    ("rec_batch_size", "prefix samples per recommendation step"),
    ("kg_batch_size", "triplets per KG step"),
    ("learning_rate", "Adam step size"),
    ("lambda", "L2 weight"),
    ("seed", "seed for initialization, shuffling, negatives and dropout"),
    ("grad_clip", "global gradient-norm bound; empty disables clipping"),
    ("kg_phase", "run the KG phase each epoch"),
    ("rec_loss", "cross_entropy or binary"),
    ("checkpoint_every", "write a checkpoint every N epochs; 0 writes only the final one"),
    ("k", "cutoff K for Recall@K, MRR@K and predict output"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub sessions_path: Option<PathBuf>,
    pub attributes_path: Option<PathBuf>,
    pub use_attributes: bool,
    pub test_fraction: f64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub checkpoint_every: usize,
    pub k: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            sessions_path: None,
            attributes_path: None,
            use_attributes: true,
            test_fraction: 0.1,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            checkpoint_every: 0,
            k: 20,
        }
    }
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| KsttError::Config(format!("{key}: cannot parse {raw:?}")))
}

fn optional<T: FromStr>(key: &str, raw: &str) -> Result<Option<T>> {
    if raw.is_empty() {
        Ok(None)
    } else {
        value(key, raw).map(Some)
    }
}

fn path(raw: &str) -> Option<PathBuf> {
    (!raw.is_empty()).then(|| PathBuf::from(raw))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut ffn_dim = None;
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, raw) = line
                .split_once('=')
                .ok_or_else(|| KsttError::Config(format!("line {}: expected key = value", no + 1)))?;
            let key = key.trim();
            let raw = raw.trim();
            if key == "ffn_dim" {
                ffn_dim = optional(key, raw).map_err(|e| at_line(e, no + 1))?;
                continue;
            }
            cfg.set(key, raw).map_err(|e| at_line(e, no + 1))?;
        }
        cfg.model.ffn_dim = ffn_dim.unwrap_or(4 * cfg.model.dim);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| KsttError::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies one setting. `ffn_dim` follows `dim` only when set through
    /// `parse`; here it is taken literally.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "sessions_path" => self.sessions_path = path(raw),
            "attributes_path" => self.attributes_path = path(raw),
            "use_attributes" => self.use_attributes = value(key, raw)?,
            "test_fraction" => self.test_fraction = value(key, raw)?,
            "dim" => m.dim = value(key, raw)?,
            "gcn_layers" => m.gcn_layers = value(key, raw)?,
            "leaky_slope" => m.leaky_slope = value(key, raw)?,
            "dropout" => m.dropout = value(key, raw)?,
            "time_encoder" => m.time_encoder = raw.parse()?,
            "tbe_buckets" => m.tbe_buckets = value(key, raw)?,
            "mte_frequencies" => m.mte_frequencies = value(key, raw)?,
            "mte_harmonics" => m.mte_harmonics = optional(key, raw)?,
            "layers" => m.layers = value(key, raw)?,
            "heads" => m.heads = value(key, raw)?,
            "ffn_dim" => m.ffn_dim = optional(key, raw)?.unwrap_or(4 * m.dim),
            "readout" => m.readout = raw.parse()?,
            "epochs" => t.epochs = value(key, raw)?,
            "rec_batch_size" => t.rec_batch_size = value(key, raw)?,
            "kg_batch_size" => t.kg_batch_size = value(key, raw)?,
            "learning_rate" => t.learning_rate = value(key, raw)?,
            "lambda" => t.lambda = value(key, raw)?,
            "seed" => t.seed = value(key, raw)?,
            "grad_clip" => t.grad_clip = optional(key, raw)?,
            "kg_phase" => t.kg_phase = value(key, raw)?,
            "rec_loss" => t.rec_loss = raw.parse()?,
            "checkpoint_every" => self.checkpoint_every = value(key, raw)?,
            "k" => self.k = value(key, raw)?,
            other => return Err(KsttError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Checks ranges that need no data. Architecture constraints that
    /// involve several keys (heads, MTE layout) are checked again when the
    /// model is built.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.transformer_config().validate()?;
        if self.model.time_encoder == TimeEncoderKind::Mte {
            self.model.time_config().mte_harmonics()?;
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(KsttError::Config(format!("test_fraction {} outside (0, 1)", self.test_fraction)));
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return Err(KsttError::Config(format!("dropout {} outside [0, 1)", self.model.dropout)));
        }
        if self.k == 0 {
            return Err(KsttError::Config("k must be at least 1".into()));
        }
        Ok(())
    }

    /// The configuration as parseable text, one key per line with its
    /// description as a comment.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, doc) in KEYS {
            let _ = writeln!(out, "# {doc}\n{key} = {}", self.raw(key));
        }
        out
    }

    fn raw(&self, key: &str) -> String {
        let m = &self.model;
        let t = &self.train;
        let p = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let o = |v: Option<String>| v.unwrap_or_default();
        match key {
            "sessions_path" => p(&self.sessions_path),
            "attributes_path" => p(&self.attributes_path),
            "use_attributes" => self.use_attributes.to_string(),
            "test_fraction" => self.test_fraction.to_string(),
            "dim" => m.dim.to_string(),
            "gcn_layers" => m.gcn_layers.to_string(),
            "leaky_slope" => m.leaky_slope.to_string(),
            "dropout" => m.dropout.to_string(),
            "time_encoder" => m.time_encoder.to_string(),
            "tbe_buckets" => m.tbe_buckets.to_string(),
            "mte_frequencies" => m.mte_frequencies.to_string(),
            "mte_harmonics" => o(m.mte_harmonics.map(|v| v.to_string())),
            "layers" => m.layers.to_string(),
            "heads" => m.heads.to_string(),
            "ffn_dim" => m.ffn_dim.to_string(),
            "readout" => m.readout.to_string(),
            "epochs" => t.epochs.to_string(),
            "rec_batch_size" => t.rec_batch_size.to_string(),
            "kg_batch_size" => t.kg_batch_size.to_string(),
            "learning_rate" => t.learning_rate.to_string(),
            "lambda" => t.lambda.to_string(),
            "seed" => t.seed.to_string(),
            "grad_clip" => o(t.grad_clip.map(|v| v.to_string())),
            "kg_phase" => t.kg_phase.to_string(),
            "rec_loss" => t.rec_loss.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "k" => self.k.to_string(),
            _ => unreachable!("raw() called with a key outside KEYS"),
        }
    }
}

fn at_line(err: KsttError, line: usize) -> KsttError {
    match err {
        KsttError::Config(msg) => KsttError::Config(format!("line {line}: {msg}")),
        other => other,
    }
}
