//! Run configuration: nested TOML sections with `section.key=value`
//! overrides applied before deserialization.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{AugmentPolicy, PreprocessPolicy};
use crate::episodes::{Split, SplitRatios, DEFAULT_QUERIES};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: PathBuf,
    /// Image root; defaults to the manifest's directory.
    pub root: Option<PathBuf>,
    /// Used when the manifest carries no split column.
    pub split_ratios: String,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("data/manifest.csv"),
            root: None,
            split_ratios: SplitRatios::default().to_string(),
            split_seed: 0,
        }
    }
}

impl DataConfig {
    pub fn ratios(&self) -> Result<SplitRatios> {
        self.split_ratios.parse()
    }

    pub fn image_root(&self) -> PathBuf {
        self.root.clone().unwrap_or_else(|| {
            self.manifest
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from("."))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    /// Training episodes; one optimizer step each.
    pub episodes: usize,
    pub warmup: usize,
    pub milestones: Vec<usize>,
    pub decay: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Learning-rate multiplier for the head scalars (regularizer,
    /// calibration and temperature), which live on a much larger scale than
    /// the network weights.
    pub head_lr_scale: f64,
    /// Validation cadence in episodes; `0` disables validation.
    pub val_every: usize,
    pub val_episodes: usize,
    pub seed: u64,
    pub augment: AugmentPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_way: 4,
            k_shot: 5,
            n_query: DEFAULT_QUERIES,
            episodes: 2000,
            warmup: 75,
            milestones: vec![375, 625, 875, 1125, 1375],
            decay: 0.5,
            lr: 2e-5,
            weight_decay: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            head_lr_scale: 1.0,
            val_every: 125,
            val_episodes: 100,
            seed: 0,
            augment: AugmentPolicy::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup > self.episodes && self.episodes > 0 {
            return Err(Error::Config(format!(
                "warmup {} exceeds the {} training episodes",
                self.warmup, self.episodes
            )));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("milestones must be strictly increasing".into()));
        }
        if self.milestones.last().is_some_and(|&m| m >= self.episodes) {
            return Err(Error::Config("milestones must lie before the last episode".into()));
        }
        if !(self.lr >= 0.0) || !(self.decay > 0.0) || !(self.weight_decay >= 0.0) || !(self.head_lr_scale > 0.0) {
            return Err(Error::Config("learning rate, decay, weight decay and head scale must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub episodes: usize,
    pub seed: u64,
    pub split: Split,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_way: 4,
            k_shot: 5,
            n_query: DEFAULT_QUERIES,
            episodes: 500,
            seed: 1234,
            split: Split::Test,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub preprocess: PreprocessPolicy,
}

impl RunConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value = text.parse::<toml::Table>()?.into();
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = value.try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.ratios()?;
        if self.preprocess.size != self.model.image_size {
            return Err(Error::Config(format!(
                "preprocess size {} differs from model image size {}",
                self.preprocess.size, self.model.image_size
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        fingerprint_of(self)
    }
}

pub fn fingerprint_of<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    let digest = Sha256::digest(&json);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Applies `a.b.c=value`; the value is read as a TOML literal when it parses
/// as one and as a bare string otherwise.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad override key `{path}`")));
    }
    let mut node = root;
    for key in &keys[..keys.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{key}` in `{path}` is not a section")))?;
        node = table
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("override parent of `{path}` is not a section")))?;
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}
