//! Named parameter tensors and their initialisation.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// How a tensor is initialised and whether the optimiser touches it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Glorot-uniform with the given fan-in / fan-out.
    Weight { fan_in: usize, fan_out: usize },
    /// Glorot-uniform embedding table whose row 0 (padding) is pinned at zero.
    PaddedEmbedding,
    /// Constant initial value (biases 0, layer-norm scales 1, shifts 0).
    Constant(f64),
    /// Non-trainable buffer (batch-norm running statistics).
    Buffer(f64),
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::Buffer(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub kind: ParamKind,
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    specs: Vec<ParamSpec>,
    values: Vec<Mat>,
    index: BTreeMap<String, usize>,
}

/// Glorot bound `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn name_seed(seed: u64, name: &str) -> u64 {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(name.as_bytes())
        .finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor initialised from `seed`. Each tensor draws from
    /// its own stream keyed by name, so adding a tensor never perturbs the
    /// initial values of the others.
    pub fn register(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        kind: ParamKind,
        seed: u64,
    ) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let value = init_tensor(rows, cols, kind, name_seed(seed, name));
        let id = self.values.len();
        self.specs.push(ParamSpec {
            name: name.to_string(),
            rows,
            cols,
            kind,
        });
        self.values.push(value);
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.specs[id.0].name
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.specs[id.0].kind
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.specs[id.0].kind.trainable()
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Mat) {
        assert_eq!(
            self.values[id.0].shape(),
            value.shape(),
            "shape mismatch for {}",
            self.specs[id.0].name
        );
        self.values[id.0] = value;
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.ids()
            .filter(|&id| self.is_trainable(id))
            .map(|id| self.values[id.0].len())
            .sum()
    }
}

fn init_tensor(rows: usize, cols: usize, kind: ParamKind, seed: u64) -> Mat {
    match kind {
        ParamKind::Weight { fan_in, fan_out } => {
            let bound = glorot_bound(fan_in, fan_out);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Mat::from_vec(
                rows,
                cols,
                (0..rows * cols)
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect(),
            )
        }
        ParamKind::PaddedEmbedding => {
            let bound = glorot_bound(rows, cols);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut m = Mat::from_vec(
                rows,
                cols,
                (0..rows * cols)
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect(),
            );
            if rows > 0 {
                m.row_mut(0).fill(0.0);
            }
            m
        }
        ParamKind::Constant(v) | ParamKind::Buffer(v) => Mat::filled(rows, cols, v),
    }
}

/// Accumulated gradients keyed by parameter.
#[derive(Debug, Clone, Default)]
pub struct GradStore {
    grads: BTreeMap<ParamId, Mat>,
}

impl GradStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, id: ParamId, g: &Mat) {
        match self.grads.get_mut(&id) {
            Some(existing) => existing.add_assign(g),
            None => {
                self.grads.insert(id, g.clone());
            }
        }
    }

    pub fn extend(&mut self, grads: Vec<(ParamId, Mat)>) {
        for (id, g) in grads {
            self.add(id, &g);
        }
    }

    pub fn merge(&mut self, other: &GradStore) {
        for (id, g) in &other.grads {
            self.add(*id, g);
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Mat)> {
        self.grads.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(Mat::all_finite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glorot_bound_for_4x8() {
        assert!((glorot_bound(4, 8) - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn weights_within_bound_and_biases_zero() {
        let mut s = ParamStore::new();
        let w = s.register(
            "w",
            4,
            8,
            ParamKind::Weight {
                fan_in: 4,
                fan_out: 8,
            },
            7,
        );
        let b = s.register("b", 1, 8, ParamKind::Constant(0.0), 7);
        let bound = glorot_bound(4, 8);
        assert!(s.value(w).data.iter().all(|v| v.abs() <= bound));
        assert!(s.value(w).data.iter().any(|v| *v != 0.0));
        assert!(s.value(b).data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn registration_order_does_not_change_values() {
        let kind = ParamKind::Weight {
            fan_in: 3,
            fan_out: 3,
        };
        let mut a = ParamStore::new();
        a.register("x", 3, 3, kind, 1);
        let ay = a.register("y", 3, 3, kind, 1);
        let mut b = ParamStore::new();
        let by = b.register("y", 3, 3, kind, 1);
        assert_eq!(a.value(ay), b.value(by));
    }

    #[test]
    fn padded_embedding_row_zero() {
        let mut s = ParamStore::new();
        let e = s.register("emb", 5, 4, ParamKind::PaddedEmbedding, 3);
        assert!(s.value(e).row(0).iter().all(|v| *v == 0.0));
        assert!(s.value(e).row(1).iter().any(|v| *v != 0.0));
    }
}
