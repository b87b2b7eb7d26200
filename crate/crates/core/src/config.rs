//! Run configuration: one TOML file with `[model]`, `[recall]`, `[train]`
//! and `[synth]` sections. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::recall::RecallLossConfig;
use crate::synth::SynthConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub lr_anneal_factor: f64,
    pub lr_anneal_every: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Sampled negatives per positive when evaluating recall.
    pub recall_negatives: usize,
    /// Sampled negatives per click when training the ranker.
    pub rank_negatives: usize,
    /// Share of person-job pairs (and click users) held out.
    pub test_fraction: f64,
    pub eval_ks: Vec<usize>,
    /// Recall@K used to pick the best checkpoint.
    pub select_k: usize,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr: 0.001,
            lr_anneal_factor: 0.8,
            lr_anneal_every: 3,
            max_epochs: 30,
            seed: 7,
            recall_negatives: 200,
            rank_negatives: 3,
            test_fraction: 0.2,
            eval_ks: vec![20, 40, 60, 80, 100],
            select_k: 20,
            workers: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("train.batch_size must be >= 2".into()));
        }
        if !(self.lr > 0.0) || !(self.lr_anneal_factor > 0.0) || self.lr_anneal_every == 0 {
            return Err(Error::Config(
                "train.lr and lr_anneal_factor must be > 0 and lr_anneal_every >= 1".into(),
            ));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("train.max_epochs must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config("train.test_fraction must be in [0, 1)".into()));
        }
        if self.rank_negatives == 0 || self.recall_negatives == 0 {
            return Err(Error::Config("train negatives must be >= 1".into()));
        }
        if self.eval_ks.is_empty() || self.eval_ks.iter().any(|&k| k == 0 || k > self.recall_negatives + 1) {
            return Err(Error::Config(format!(
                "train.eval_ks must be non-empty and within 1..={}",
                self.recall_negatives + 1
            )));
        }
        if !self.eval_ks.contains(&self.select_k) {
            return Err(Error::Config("train.select_k must be one of train.eval_ks".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub recall: RecallLossConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.recall.validate()?;
        self.train.validate()?;
        self.synth.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// SHA-256 of the canonical JSON form (keys sorted), hex encoded.
    pub fn fingerprint(&self) -> String {
        let v = serde_json::to_value(self).expect("config serialises");
        let canonical = serde_json::to_string(&v).expect("json");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}
