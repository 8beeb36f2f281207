//! Declarative run configuration.
//!
//! A run is described by a TOML file whose sections mirror the modules:
//!
//! ```toml
//! seed = 13
//! out_dir = "runs/demo"
//!
//! [encoder]
//! d_model = 64
//!
//! [train]
//! regime = "unsup"
//! aug1 = "shuffle"
//! aug2 = "feature_cutoff:0.2"
//!
//! [data]
//! test = ["sts-b.tsv"]
//!
//! [eval]
//! pooling = "last_two_layers_mean"
//! ```
//!
//! Every key has a default and unknown keys are rejected. `key=value`
//! overrides are applied on top of the file before deserialization.

use crate::data::SyntheticSizes;
use crate::encoder::{EncoderConfig, Pooling};
use crate::eval::sweeps::{BATCH_SIZES, FEW_SHOT_SIZES, TEMPERATURES};
use crate::train::{Regime, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Parse(String),
    #[error("invalid override {0:?}: expected key=value")]
    Override(String),
    #[error("invalid {field}: {message}")]
    Invalid { field: String, message: String },
}

pub type Result<T, E = ConfigError> = std::result::Result<T, E>;

/// Encoder shape; the vocabulary size comes from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub max_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Minimum corpus count for a token to enter the vocabulary.
    pub min_count: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let e = EncoderConfig::default();
        Self { max_len: e.max_len, d_model: e.d_model, n_layers: e.n_layers, n_heads: e.n_heads, d_ff: e.d_ff, min_count: 1 }
    }
}

/// Data sources. Missing paths are filled from the seeded synthetic corpus.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub unlabeled: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Vec<PathBuf>,
    pub nli: Option<PathBuf>,
    /// Use the synthetic NLI triples when no NLI file is given.
    pub synthetic_nli: bool,
    /// Corpus for the token frequency table; defaults to the test pairs.
    pub freq_corpus: Option<PathBuf>,
    pub synthetic: SyntheticSizes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub pooling: Pooling,
    pub histogram_bins: usize,
    pub freq_k: Vec<usize>,
    pub few_shot_sizes: Vec<usize>,
    pub temperatures: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub batch_epochs: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            pooling: Pooling::LastTwoLayersMean,
            histogram_bins: 10,
            freq_k: vec![0, 1, 2, 3, 4, 6, 8, 12, 16, 24, 32],
            few_shot_sizes: FEW_SHOT_SIZES.to_vec(),
            temperatures: TEMPERATURES.to_vec(),
            batch_sizes: BATCH_SIZES.to_vec(),
            batch_epochs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root of every random stream.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub encoder: EncoderSection,
    pub train: TrainConfig,
    pub data: DataSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 13,
            out_dir: PathBuf::from("runs/default"),
            encoder: EncoderSection::default(),
            train: TrainConfig::default(),
            data: DataSection::default(),
            eval: EvalSection::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `a.b.c = value` in a table, creating intermediate tables.
fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').map(str::trim).collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override(key.to_string()));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => {
                return Err(ConfigError::Invalid { field: key.to_string(), message: format!("{p} is not a section") })
            }
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::resolve(text, &[])
    }

    /// File text (may be empty) plus `key=value` overrides, deserialized.
    pub fn resolve(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::Override(o.clone()))?;
            set_path(&mut table, k, parse_value(v))?;
        }
        let text = toml::to_string(&table).map_err(|e| ConfigError::Parse(e.to_string()))?;
        toml::from_str(&text).map_err(|e| ConfigError::Parse(e.message().to_string()))
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Io { path: p.to_path_buf(), source })?,
            None => String::new(),
        };
        Self::resolve(&text, overrides)
    }

    /// The train section with the root seed filled in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        let e = &self.encoder;
        EncoderConfig {
            vocab_size,
            max_len: e.max_len,
            d_model: e.d_model,
            n_layers: e.n_layers,
            n_heads: e.n_heads,
            d_ff: e.d_ff,
            pooling: self.eval.pooling,
        }
    }

    /// Field-level checks that need no data.
    pub fn validate(&self) -> Result<()> {
        let invalid = |field: &str, message: String| Err(ConfigError::Invalid { field: field.into(), message });
        if let Err(e) = self.encoder_config(1).validate() {
            return invalid("encoder", e.to_string());
        }
        if self.encoder.max_len < 3 {
            return invalid("encoder.max_len", format!("must be at least 3, got {}", self.encoder.max_len));
        }
        if let Err(e) = self.train.validate() {
            return match e {
                crate::train::TrainError::Config { field, message } => invalid(&format!("train.{field}"), message),
                other => invalid("train", other.to_string()),
            };
        }
        if self.train.regime != Regime::Unsup && self.data.nli.is_none() && !self.data.synthetic_nli {
            return invalid(
                "data.nli",
                format!("the {} regime needs an NLI file (or data.synthetic_nli = true)", self.train.regime),
            );
        }
        if let Err(e) = self.data.synthetic.validate() {
            return invalid("data.synthetic", e);
        }
        if self.eval.histogram_bins < 2 {
            return invalid("eval.histogram_bins", "must be at least 2".into());
        }
        if self.eval.batch_epochs == 0 {
            return invalid("eval.batch_epochs", "must be positive".into());
        }
        if self.eval.batch_sizes.iter().any(|&b| b < 2) {
            return invalid("eval.batch_sizes", "every batch size must be at least 2".into());
        }
        if self.eval.temperatures.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return invalid("eval.temperatures", "every temperature must be positive".into());
        }
        Ok(())
    }

    /// Fully resolved TOML; loading it reproduces `self`.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of [`RunConfig::to_toml`].
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        Sha256::digest(self.to_toml().as_bytes()).iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
