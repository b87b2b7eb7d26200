//! Convolutional item encoder.
//!
//! Each item is embedded word by word and passed through two 1-D
//! convolutions (windows 2 and 3). Each branch applies batch normalisation,
//! ReLU and a max over positions; the two pooled vectors are concatenated
//! and projected back to `d`.
//!
//! Convolutions are causal: the window ending at position `s` covers tokens
//! `s - w + 1 ..= s`, with padding on the left. Output length equals input
//! length, items shorter than the window still produce outputs, and the set
//! of windows of a prefix is a subset of the windows of the full item.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{BnObservation, ForwardCtx, Mode};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::Mat;
use crate::types::{JobDescription, TokenizedItem};
use crate::vocab::PAD_ID;

pub const WINDOWS: [usize; 2] = [2, 3];
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBranch {
    pub window: usize,
    pub weight: ParamId,
    pub bias: ParamId,
    pub bn_gamma: ParamId,
    pub bn_beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemEncoder {
    pub d: usize,
    pub vocab_size: usize,
    pub embedding: ParamId,
    pub branches: Vec<ConvBranch>,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

impl ItemEncoder {
    pub fn register(store: &mut ParamStore, vocab_size: usize, d: usize, seed: u64) -> Self {
        let embedding = store.register("item.embedding", vocab_size, d, ParamKind::PaddedEmbedding, seed);
        let branches = WINDOWS
            .iter()
            .map(|&w| {
                let p = format!("item.conv{w}");
                ConvBranch {
                    window: w,
                    weight: store.register(
                        &format!("{p}.weight"),
                        w * d,
                        d,
                        ParamKind::Weight {
                            fan_in: w * d,
                            fan_out: d,
                        },
                        seed,
                    ),
                    bias: store.register(&format!("{p}.bias"), 1, d, ParamKind::Constant(0.0), seed),
                    bn_gamma: store.register(&format!("{p}.bn.scale"), 1, d, ParamKind::Constant(1.0), seed),
                    bn_beta: store.register(&format!("{p}.bn.shift"), 1, d, ParamKind::Constant(0.0), seed),
                    running_mean: store.register(
                        &format!("{p}.bn.running_mean"),
                        1,
                        d,
                        ParamKind::Buffer(0.0),
                        seed,
                    ),
                    running_var: store.register(
                        &format!("{p}.bn.running_var"),
                        1,
                        d,
                        ParamKind::Buffer(1.0),
                        seed,
                    ),
                }
            })
            .collect();
        let proj_w = store.register(
            "item.proj.weight",
            2 * d,
            d,
            ParamKind::Weight {
                fan_in: 2 * d,
                fan_out: d,
            },
            seed,
        );
        let proj_b = store.register("item.proj.bias", 1, d, ParamKind::Constant(0.0), seed);
        Self {
            d,
            vocab_size,
            embedding,
            branches,
            proj_w,
            proj_b,
        }
    }

    fn check_tokens(&self, items: &[&TokenizedItem]) -> Result<()> {
        for item in items {
            if item.token_ids.is_empty() {
                return Err(Error::Domain("item has no tokens".into()));
            }
            if let Some(t) = item.token_ids.iter().find(|&&t| t >= self.vocab_size) {
                return Err(Error::Domain(format!(
                    "token id {t} outside vocabulary of {}",
                    self.vocab_size
                )));
            }
        }
        Ok(())
    }

    /// Pre-projection pooled activations of every branch, `n x (2d)`.
    /// Batch-norm statistics are shared across all items in the call.
    pub fn pooled(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        items: &[&TokenizedItem],
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        self.check_tokens(items)?;
        let lengths: Vec<usize> = items.iter().map(|i| i.token_ids.len()).collect();
        let emb = tape.param(store, self.embedding);
        let mut pooled = Vec::with_capacity(self.branches.len());
        for br in &self.branches {
            let w = br.window;
            let mut ids = Vec::with_capacity(lengths.iter().sum::<usize>() * w);
            for item in items {
                let toks = &item.token_ids;
                for s in 0..toks.len() {
                    for k in 0..w {
                        let pos = s as isize - (w - 1 - k) as isize;
                        ids.push(if pos < 0 {
                            None
                        } else {
                            let t = toks[pos as usize];
                            (t != PAD_ID).then_some(t)
                        });
                    }
                }
            }
            let rows = ids.len() / w;
            let windows = tape.gather_rows(emb, ids);
            let windows = tape.reshape(windows, rows, w * self.d);
            let wt = tape.param(store, br.weight);
            let b = tape.param(store, br.bias);
            let conv = tape.matmul(windows, wt);
            let conv = tape.add_row(conv, b);
            let gamma = tape.param(store, br.bn_gamma);
            let beta = tape.param(store, br.bn_beta);
            let normed = match ctx.mode {
                Mode::Train => {
                    let (out, mean, var) = tape.batch_norm_train(conv, gamma, beta, BN_EPS);
                    let unbias = if rows > 1 {
                        rows as f64 / (rows - 1) as f64
                    } else {
                        1.0
                    };
                    ctx.bn_observations.push(BnObservation {
                        running_mean: br.running_mean,
                        running_var: br.running_var,
                        mean,
                        var: var.into_iter().map(|v| v * unbias).collect(),
                    });
                    out
                }
                Mode::Eval => tape.batch_norm_eval(
                    conv,
                    gamma,
                    beta,
                    &store.value(br.running_mean).data,
                    &store.value(br.running_var).data,
                    BN_EPS,
                ),
            };
            let act = tape.relu(normed);
            pooled.push(tape.segment_max(act, &lengths));
        }
        Ok(tape.concat_cols(&pooled))
    }

    /// Encodes a batch of items into an `n x d` matrix.
    pub fn encode_items(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        items: &[&TokenizedItem],
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let pooled = self.pooled(tape, store, items, ctx)?;
        let w = tape.param(store, self.proj_w);
        let b = tape.param(store, self.proj_b);
        let out = tape.matmul(pooled, w);
        Ok(tape.add_row(out, b))
    }

    /// One item as a `1 x d` row.
    pub fn encode_item(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        item: &TokenizedItem,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        self.encode_items(tape, store, &[item], ctx)
    }

    /// `max_items x d` matrix whose first rows are the job's encoded items
    /// (rest zero), plus the mask of real rows.
    pub fn encode_all_items(
        &self,
        store: &ParamStore,
        jd: &JobDescription,
        max_items: usize,
        ctx: &mut ForwardCtx,
    ) -> Result<(Mat, Vec<bool>)> {
        let items: Vec<&TokenizedItem> = jd.model_items(max_items).iter().collect();
        let mut tape = Tape::new();
        let enc = self.encode_items(&mut tape, store, &items, ctx)?;
        let v = tape.value(enc);
        let mut out = Mat::zeros(max_items, self.d);
        out.data[..v.len()].copy_from_slice(&v.data);
        let mask = (0..max_items).map(|m| m < items.len()).collect();
        Ok((out, mask))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_params;

    fn setup(vocab: usize, d: usize) -> (ParamStore, ItemEncoder) {
        let mut s = ParamStore::new();
        let e = ItemEncoder::register(&mut s, vocab, d, 42);
        (s, e)
    }

    fn item(ids: &[usize]) -> TokenizedItem {
        TokenizedItem {
            token_ids: ids.to_vec(),
        }
    }

    fn eval_row(s: &ParamStore, e: &ItemEncoder, it: &TokenizedItem) -> Vec<f64> {
        let mut t = Tape::new();
        let v = e.encode_item(&mut t, s, it, &mut ForwardCtx::eval()).unwrap();
        t.value(v).data.clone()
    }

    fn pooled_row(s: &ParamStore, e: &ItemEncoder, it: &TokenizedItem) -> Vec<f64> {
        let mut t = Tape::new();
        let v = e.pooled(&mut t, s, &[it], &mut ForwardCtx::eval()).unwrap();
        t.value(v).data.clone()
    }

    #[test]
    fn identical_items_identical_outputs_in_one_batch() {
        let (s, e) = setup(20, 8);
        let a = item(&[3, 4, 5]);
        let b = item(&[3, 4, 5]);
        let c = item(&[7]);
        let mut t = Tape::new();
        let mut ctx = ForwardCtx::train(0.0, 1);
        let v = e.encode_items(&mut t, &s, &[&a, &b, &c], &mut ctx).unwrap();
        let m = t.value(v);
        assert_eq!(m.row(0), m.row(1));
        assert_eq!(ctx.bn_observations.len(), 2);
    }

    #[test]
    fn single_token_item_is_finite() {
        let (s, e) = setup(20, 8);
        let out = eval_row(&s, &e, &item(&[9]));
        assert_eq!(out.len(), 8);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn out_of_vocab_token_is_domain_error() {
        let (s, e) = setup(20, 8);
        let mut t = Tape::new();
        let r = e.encode_item(&mut t, &s, &item(&[3, 20]), &mut ForwardCtx::eval());
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn zero_kernels_reduce_to_projected_relu_bias() {
        // With zero conv weights each branch outputs its bias everywhere;
        // eval-mode BN with running stats (0, 1) and unit scale is the
        // identity up to 1/sqrt(1 + eps).
        let (mut s, e) = setup(10, 4);
        let bias = [0.5, -1.0, 2.0, 0.0];
        for br in &e.branches {
            s.set(br.weight, Mat::zeros(br.window * 4, 4));
            s.set(br.bias, Mat::row_vec(bias.to_vec()));
        }
        let proj: Vec<f64> = (0..32).map(|k| (k as f64 - 10.0) * 0.1).collect();
        s.set(e.proj_w, Mat::from_vec(8, 4, proj.clone()));
        s.set(e.proj_b, Mat::row_vec(vec![0.1, 0.2, 0.3, 0.4]));
        let out = eval_row(&s, &e, &item(&[2, 3, 4]));

        let bn = 1.0 / (1.0 + BN_EPS).sqrt();
        let relu: Vec<f64> = bias.iter().map(|b| (b * bn).max(0.0)).collect();
        let pooled: Vec<f64> = relu.iter().chain(relu.iter()).copied().collect();
        for c in 0..4 {
            let mut expect = [0.1, 0.2, 0.3, 0.4][c];
            for (r, p) in pooled.iter().enumerate() {
                expect += p * proj[r * 4 + c];
            }
            assert!((out[c] - expect).abs() < 1e-12, "col {c}: {} vs {expect}", out[c]);
        }
    }

    #[test]
    fn repeated_token_saturates_from_length_three() {
        let (s, e) = setup(20, 8);
        let base = eval_row(&s, &e, &item(&[5, 5, 5]));
        for len in 4..9 {
            let out = eval_row(&s, &e, &item(&vec![5; len]));
            for (a, b) in base.iter().zip(&out) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn appending_tokens_never_lowers_pooled_activations() {
        let (s, e) = setup(20, 8);
        let full = [4usize, 9, 2, 17, 11, 6];
        for k in 1..full.len() {
            let short = pooled_row(&s, &e, &item(&full[..k]));
            let long = pooled_row(&s, &e, &item(&full[..k + 1]));
            for (a, b) in short.iter().zip(&long) {
                assert!(b - a >= -1e-6);
            }
        }
    }

    #[test]
    fn encode_all_items_pads_and_masks() {
        let (s, e) = setup(20, 8);
        let jd = JobDescription {
            jd_id: "j".into(),
            title_id: 0,
            items: vec![item(&[2, 3]), item(&[4])],
            raw_items: vec![],
        };
        let (m, mask) = e.encode_all_items(&s, &jd, 5, &mut ForwardCtx::eval()).unwrap();
        assert_eq!(m.shape(), (5, 8));
        assert_eq!(mask, vec![true, true, false, false, false]);
        assert!(m.row(3).iter().all(|v| *v == 0.0));
        assert_eq!(m.row(1), &eval_row(&s, &e, &item(&[4]))[..]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (s, e) = setup(20, 8);
        let items = [item(&[2, 5, 7]), item(&[3]), item(&[9, 9, 4, 1, 6])];
        let weights: Vec<f64> = (0..24).map(|k| ((k * 7 % 11) as f64 - 5.0) / 5.0).collect();
        let ids: Vec<ParamId> = s.ids().filter(|&id| s.is_trainable(id)).collect();
        let report = check_params(&s, &ids, 50, 1e-3, 77, |t, st| {
            let refs: Vec<&TokenizedItem> = items.iter().collect();
            let mut ctx = ForwardCtx::train(0.0, 0);
            let out = e.encode_items(t, st, &refs, &mut ctx).unwrap();
            let w = t.constant(Mat::from_vec(3, 8, weights.clone()));
            let z = t.mul(out, w);
            t.sum(z)
        });
        assert!(report.max_rel_error() < 1e-4, "{:?}", report.worst());
    }
}
