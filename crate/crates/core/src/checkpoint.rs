//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "SKRCKPT\0"
//! version   u32
//! meta_len  u64
//! meta      meta_len bytes of JSON (CheckpointMeta)
//! tensors   f64 values of every tensor listed in meta, in order
//! digest    32 bytes SHA-256 of everything above
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::DataDims;
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::tensor::Mat;

pub const MAGIC: &[u8; 8] = b"SKRCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Recall,
    Rank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    /// Completed epochs.
    pub epoch: usize,
    pub fingerprint: String,
    pub config: RunConfig,
    pub dims: DataDims,
    pub vocab: Vec<String>,
    /// Neighbour ids per job id, fixed after the warm-up refresh.
    #[serde(default)]
    pub neighbors: BTreeMap<String, Vec<String>>,
    /// Jobs that may serve as neighbours.
    #[serde(default)]
    pub train_jds: Vec<String>,
    pub adam_step: u64,
    pub adam: AdamConfig,
    /// Metrics at the time of saving.
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<Mat>,
}

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

impl Checkpoint {
    /// Packs parameters and optimiser moments. `meta.tensors` and
    /// `meta.adam_step` are filled in here.
    pub fn pack(mut meta: CheckpointMeta, store: &ParamStore, adam: &Adam) -> Self {
        let mut entries = Vec::new();
        let mut tensors = Vec::new();
        for id in store.ids() {
            let v = store.value(id);
            entries.push(TensorEntry {
                name: store.name(id).to_string(),
                rows: v.rows,
                cols: v.cols,
            });
            tensors.push(v.clone());
        }
        for (prefix, moments) in [(ADAM_M, &adam.m), (ADAM_V, &adam.v)] {
            for (id, m) in store.ids().zip(moments.iter()) {
                entries.push(TensorEntry {
                    name: format!("{prefix}{}", store.name(id)),
                    rows: m.rows,
                    cols: m.cols,
                });
                tensors.push(m.clone());
            }
        }
        meta.tensors = entries;
        meta.adam_step = adam.step;
        meta.adam = adam.config;
        Self { meta, tensors }
    }

    /// Copies stored values into `store` (whose layout must match) and
    /// returns the optimiser state.
    pub fn unpack_into(&self, store: &mut ParamStore) -> Result<Adam> {
        let by_name: BTreeMap<&str, usize> = self
            .meta
            .tensors
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.as_str(), i))
            .collect();
        let fetch = |name: &str, shape: (usize, usize)| -> Result<Mat> {
            let i = *by_name
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            let t = &self.tensors[i];
            if t.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, model expects {shape:?}",
                    t.shape()
                )));
            }
            Ok(t.clone())
        };
        let n_params = self.meta.tensors.iter().filter(|e| !e.name.starts_with("adam.")).count();
        if n_params != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {n_params} parameters, model has {}",
                store.len()
            )));
        }
        let mut adam = Adam::new(store, self.meta.adam);
        adam.step = self.meta.adam_step;
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let name = store.name(id).to_string();
            let shape = store.value(id).shape();
            store.set(id, fetch(&name, shape)?);
            adam.m[k] = fetch(&format!("{ADAM_M}{name}"), shape)?;
            adam.v[k] = fetch(&format!("{ADAM_V}{name}"), shape)?;
        }
        Ok(adam)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let n: usize = self.tensors.iter().map(|t| t.len()).sum();
        let mut out = Vec::with_capacity(8 + 4 + 8 + meta.len() + 8 * n + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for (t, e) in self.tensors.iter().zip(&self.meta.tensors) {
            if t.shape() != (e.rows, e.cols) {
                return Err(Error::Checkpoint(format!("tensor {} shape mismatch", e.name)));
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 8 + 4 + 8 + 32 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("digest mismatch, file is corrupt"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let meta_end = 20usize
            .checked_add(meta_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| bad("truncated metadata"))?;
        let meta: CheckpointMeta =
            serde_json::from_slice(&body[20..meta_end]).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let mut pos = meta_end;
        let mut tensors = Vec::with_capacity(meta.tensors.len());
        for e in &meta.tensors {
            let n = e.rows * e.cols;
            let end = pos + 8 * n;
            if end > body.len() {
                return Err(bad("truncated tensor data"));
            }
            let data = body[pos..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(Mat::from_vec(e.rows, e.cols, data));
            pos = end;
        }
        if pos != body.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn expect_stage(&self, stage: Stage) -> Result<()> {
        if self.meta.stage != stage {
            return Err(Error::Checkpoint(format!(
                "expected a {stage:?} checkpoint, found {:?}",
                self.meta.stage
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;

    fn sample() -> (ParamStore, Adam, CheckpointMeta) {
        let mut s = ParamStore::new();
        s.register("a", 3, 4, ParamKind::Weight { fan_in: 3, fan_out: 4 }, 1);
        s.register("b", 1, 4, ParamKind::Constant(0.1), 1);
        s.register("c", 1, 2, ParamKind::Buffer(1.0), 1);
        let mut adam = Adam::new(&s, AdamConfig::default());
        adam.step = 5;
        adam.m[0].data[3] = 0.25;
        adam.v[1].data[0] = 1e-9;
        let meta = CheckpointMeta {
            stage: Stage::Recall,
            epoch: 2,
            fingerprint: "abc".into(),
            config: RunConfig::default(),
            dims: DataDims {
                vocab_size: 5,
                num_skills: 3,
                num_positions: 2,
                max_level: 3,
            },
            vocab: vec!["<pad>".into(), "<unk>".into()],
            neighbors: BTreeMap::from([("j1".to_string(), vec!["j2".to_string()])]),
            train_jds: vec!["j1".into(), "j2".into()],
            adam_step: 0,
            adam: AdamConfig::default(),
            metrics: BTreeMap::from([("recall@20".to_string(), 0.1 + 0.2)]),
            tensors: vec![],
        };
        (s, adam, meta)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (s, adam, meta) = sample();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let ck = Checkpoint::pack(meta, &s, &adam);
        ck.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        assert_eq!(loaded, ck);
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let mut s2 = ParamStore::new();
        s2.register("a", 3, 4, ParamKind::Weight { fan_in: 3, fan_out: 4 }, 99);
        s2.register("b", 1, 4, ParamKind::Constant(0.1), 99);
        s2.register("c", 1, 2, ParamKind::Buffer(1.0), 99);
        s2.value_mut(s2.ids().nth(2).unwrap()).data[0] = -3.0;
        let a2 = loaded.unpack_into(&mut s2).unwrap();
        assert_eq!(s2, s);
        assert_eq!(a2, adam);
    }

    #[test]
    fn corruption_detected() {
        let (s, adam, meta) = sample();
        let mut bytes = Checkpoint::pack(meta, &s, &adam).to_bytes().unwrap();
        let k = bytes.len() - 40;
        bytes[k] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::from_bytes(b"nonsense").is_err());
    }

    #[test]
    fn layout_mismatch_rejected() {
        let (s, adam, meta) = sample();
        let ck = Checkpoint::pack(meta, &s, &adam);
        let mut other = ParamStore::new();
        other.register("a", 4, 4, ParamKind::Constant(0.0), 1);
        other.register("b", 1, 4, ParamKind::Constant(0.0), 1);
        other.register("c", 1, 2, ParamKind::Buffer(0.0), 1);
        assert!(ck.unpack_into(&mut other).is_err());
    }
}
