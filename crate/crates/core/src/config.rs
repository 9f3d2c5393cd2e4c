//! Run configuration: TOML with dotted section keys, `key=value` overrides
//! and a flat echo for the run directory.
//!
//! ```toml
//! seed = 3
//! model.embed_dim = 64
//! cem.gamma = 0.5
//! data.synth.scenario = "flare"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data::SynthConfig;
use crate::enhance::CemConfig;
use crate::error::{Error, Result};
use crate::eval::{InferenceMode, Metric};
use crate::objectives::{LossConfig, OptimizerConfig};
use crate::proxy::ProxyConfig;
use crate::vit::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Identities per batch.
    pub batch_p: usize,
    /// Samples per identity per batch.
    pub batch_k: usize,
    /// Total optimiser steps; 0 means `optim.epochs` full passes.
    pub steps: usize,
    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub flip: bool,
    /// Random translation by up to this many pixels (zero padded); 0 is off.
    pub crop_pad: usize,
    /// Probability of erasing one random rectangle per sample.
    pub erase_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_p: 4,
            batch_k: 8,
            steps: 0,
            checkpoint_every: 0,
            flip: false,
            crop_pad: 0,
            erase_prob: 0.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory. When absent, `synth` is generated in memory.
    pub root: Option<PathBuf>,
    pub synth: SynthConfig,
}

/// Which samples form the retrieval problem.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    /// Query against gallery with same-identity same-camera exclusion.
    #[default]
    Heldout,
    /// Training set against itself, excluding only the sample itself.
    Train,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub metric: Metric,
    pub ranks: Vec<usize>,
    pub modes: Vec<InferenceMode>,
    pub split: EvalSplit,
    pub histogram_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metric: Metric::Euclidean,
            ranks: vec![1, 5, 10],
            modes: InferenceMode::standard(),
            split: EvalSplit::Heldout,
            histogram_bins: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    /// Drives initialisation, dropout, batch sampling and augmentation.
    pub seed: u64,
    pub model: ModelConfig,
    pub proxy: ProxyConfig,
    pub cem: CemConfig,
    pub loss: LossConfig,
    pub optim: OptimizerConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "default".to_string(),
            seed: 0,
            model: ModelConfig::default(),
            proxy: ProxyConfig::default(),
            cem: CemConfig::default(),
            loss: LossConfig::default(),
            optim: OptimizerConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        Self::from_table(table)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn from_table(table: Table) -> Result<Self> {
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides; values are TOML literals, and bare
    /// words are taken as strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut table = self.to_table()?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let key = key.trim();
            let raw = raw.trim();
            let value = parse_value(raw);
            set_path(&mut table, key, value)?;
        }
        Self::from_table(table)
    }

    pub fn to_table(&self) -> Result<Table> {
        Table::try_from(self).map_err(|e| Error::Config(format!("serialising config: {e}")))
    }

    /// Checks every cross-field constraint before any compute starts.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.proxy.validate(self.model.embed_dim)?;
        self.cem.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        self.data.synth.validate()?;
        if !self.proxy.enabled && (self.cem.primary_enabled || self.cem.proxy_enabled) {
            return Err(Error::Config(
                "cem paths need the proxy: set proxy.enabled = true or disable both cem paths".into(),
            ));
        }
        if self.train.batch_p < 2 || self.train.batch_k < 2 {
            return Err(Error::Config(format!(
                "train.batch_p and train.batch_k must be >= 2, got {} and {}",
                self.train.batch_p, self.train.batch_k
            )));
        }
        if !(0.0..=1.0).contains(&self.train.erase_prob) {
            return Err(Error::Config("train.erase_prob must be in [0, 1]".into()));
        }
        if self.eval.ranks.is_empty() || self.eval.ranks.contains(&0) {
            return Err(Error::Config("eval.ranks must be a non-empty list of ranks >= 1".into()));
        }
        if self.eval.modes.is_empty() {
            return Err(Error::Config("eval.modes must not be empty".into()));
        }
        if self.eval.histogram_bins == 0 {
            return Err(Error::Config("eval.histogram_bins must be >= 1".into()));
        }
        if !self.proxy.enabled {
            if let Some(m) = self.eval.modes.iter().find(|m| m.uses_proxy()) {
                return Err(Error::Config(format!("eval mode {m} needs proxy.enabled = true")));
            }
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("run name {:?} must be a plain file name", self.name)));
        }
        if self.data.root.is_none() && self.data.synth.model_mismatch(&self.model) {
            return Err(Error::Config(format!(
                "data.synth image {}x{} differs from model image {}x{}",
                self.data.synth.height, self.data.synth.width, self.model.image_h, self.model.image_w
            )));
        }
        Ok(())
    }

    /// One `key = value` line per leaf, sorted by key.
    pub fn echo(&self) -> Result<String> {
        let mut lines = Vec::new();
        flatten("", &Value::Table(self.to_table()?), &mut lines);
        lines.sort();
        Ok(lines.join("\n") + "\n")
    }
}

impl SynthConfig {
    fn model_mismatch(&self, model: &ModelConfig) -> bool {
        self.height != model.image_h || self.width != model.image_w
    }
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key {key:?}: {p} is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push(format!("{prefix} = {other}")),
    }
}
