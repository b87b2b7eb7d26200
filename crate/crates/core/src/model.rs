//! Model hyperparameters and the per-forward-pass context.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamId;
use crate::tensor::Mat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Hidden width, also the word-embedding width.
    pub d_model: usize,
    pub num_layers: usize,
    pub local_heads: usize,
    pub global_heads: usize,
    /// Feed-forward width; `0` means `4 * d_model`.
    pub d_ff: usize,
    pub dropout: f64,
    /// Items per job kept by the model (the rest are dropped).
    pub max_items: usize,
    /// Neighbours per tuple.
    pub num_neighbors: usize,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 512,
            num_layers: 4,
            local_heads: 6,
            global_heads: 2,
            d_ff: 0,
            dropout: 0.1,
            max_items: 40,
            num_neighbors: 2,
            bn_momentum: 0.9,
        }
    }
}

impl ModelConfig {
    pub fn num_heads(&self) -> usize {
        self.local_heads + self.global_heads
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads()
    }

    pub fn ff_dim(&self) -> usize {
        if self.d_ff == 0 {
            4 * self.d_model
        } else {
            self.d_ff
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.num_layers == 0 || self.max_items == 0 {
            return Err(Error::Config(
                "model.d_model, num_layers and max_items must be >= 1".into(),
            ));
        }
        let n = self.num_heads();
        if n == 0 {
            return Err(Error::Config("model needs at least one attention head".into()));
        }
        if self.d_model % n != 0 {
            return Err(Error::Config(format!(
                "model.d_model = {} is not divisible by {n} heads",
                self.d_model
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("model.dropout must be in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("model.bn_momentum must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Sizes derived from the data rather than chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataDims {
    pub vocab_size: usize,
    pub num_skills: usize,
    pub num_positions: usize,
    pub max_level: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics observed in train mode, to be folded into the running
/// averages once the step is done.
#[derive(Debug, Clone, PartialEq)]
pub struct BnObservation {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<f64>,
    /// Unbiased batch variance.
    pub var: Vec<f64>,
}

/// One head's attention probabilities for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadAttention {
    pub layer: usize,
    pub head: usize,
    pub global: bool,
    pub probs: Mat,
}

/// Mutable state threaded through a forward pass.
#[derive(Debug)]
pub struct ForwardCtx {
    pub mode: Mode,
    pub dropout: f64,
    rng: ChaCha8Rng,
    pub bn_observations: Vec<BnObservation>,
    /// When set, every attention head appends its probabilities here.
    pub attention: Option<Vec<HeadAttention>>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            dropout: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
            bn_observations: Vec::new(),
            attention: None,
        }
    }

    pub fn train(dropout: f64, seed: u64) -> Self {
        Self {
            mode: Mode::Train,
            dropout,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bn_observations: Vec::new(),
            attention: None,
        }
    }

    pub fn with_attention(mut self) -> Self {
        self.attention = Some(Vec::new());
        self
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    /// Inverted-dropout keep mask; `None` when dropout is inactive.
    pub fn dropout_mask(&mut self, len: usize) -> Option<Vec<f64>> {
        if !self.is_train() || self.dropout == 0.0 {
            return None;
        }
        let keep = 1.0 - self.dropout;
        let scale = 1.0 / keep;
        Some(
            (0..len)
                .map(|_| {
                    if self.rng.random_bool(keep) {
                        scale
                    } else {
                        0.0
                    }
                })
                .collect(),
        )
    }
}

/// Folds observed batch statistics into running averages:
/// `running = momentum * running + (1 - momentum) * batch`.
pub fn apply_bn_observations(
    store: &mut crate::params::ParamStore,
    observations: &[BnObservation],
    momentum: f64,
) {
    for obs in observations {
        let m = store.value_mut(obs.running_mean);
        for (r, b) in m.data.iter_mut().zip(&obs.mean) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
        let v = store.value_mut(obs.running_var);
        for (r, b) in v.data.iter_mut().zip(&obs.var) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
    }
}
