//! Transformer over a tuple of job descriptions with local and global heads.
//!
//! Each job contributes `[CLS] item_1 .. item_M [SEP]` (items padded to
//! `max_items`); jobs are concatenated central-first. Local heads only see
//! tokens of the same job, global heads see every non-padded token. There are
//! no positional encodings, so item order and neighbour order carry no
//! information.

use std::sync::Arc;

use crate::autograd::{Mask, Tape, Var};
use crate::error::Result;
use crate::item_encoder::ItemEncoder;
use crate::model::{ForwardCtx, HeadAttention, ModelConfig};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::Mat;
use crate::types::{JdTuple, TokenizedItem};

pub const LN_EPS: f64 = 1e-5;

/// Token positions of a packed tuple sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TupleLayout {
    pub max_items: usize,
    /// Real item count per job, central first.
    pub lengths: Vec<usize>,
}

impl TupleLayout {
    pub fn new(max_items: usize, lengths: Vec<usize>) -> Self {
        assert!(lengths.iter().all(|&n| n <= max_items), "job has more items than max_items");
        Self { max_items, lengths }
    }

    pub fn num_jds(&self) -> usize {
        self.lengths.len()
    }

    pub fn block(&self) -> usize {
        self.max_items + 2
    }

    pub fn seq_len(&self) -> usize {
        self.num_jds() * self.block()
    }

    pub fn cls_pos(&self, jd: usize) -> usize {
        jd * self.block()
    }

    pub fn item_pos(&self, jd: usize, m: usize) -> usize {
        jd * self.block() + 1 + m
    }

    pub fn sep_pos(&self, jd: usize) -> usize {
        jd * self.block() + self.max_items + 1
    }

    /// Owning job and whether the token is a padded item slot.
    pub fn token(&self, pos: usize) -> (usize, bool) {
        let jd = pos / self.block();
        let off = pos % self.block();
        let padded = off >= 1 && off <= self.max_items && off > self.lengths[jd];
        (jd, padded)
    }

    pub fn local_mask(&self) -> Mask {
        let s = self.seq_len();
        let toks: Vec<_> = (0..s).map(|p| self.token(p)).collect();
        let mut m = Vec::with_capacity(s * s);
        for q in &toks {
            for k in &toks {
                m.push(q.0 == k.0 && !k.1);
            }
        }
        Arc::new(m)
    }

    pub fn global_mask(&self) -> Mask {
        let s = self.seq_len();
        let keys: Vec<bool> = (0..s).map(|p| !self.token(p).1).collect();
        let mut m = Vec::with_capacity(s * s);
        for _ in 0..s {
            m.extend_from_slice(&keys);
        }
        Arc::new(m)
    }

    /// Rows of the sequence holding real tokens.
    pub fn unmasked_positions(&self) -> Vec<usize> {
        (0..self.seq_len()).filter(|&p| !self.token(p).1).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub local: Vec<HeadParams>,
    pub global: Vec<HeadParams>,
    pub wu: ParamId,
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeTransformer {
    pub d: usize,
    pub head_dim: usize,
    pub cls: ParamId,
    pub sep: ParamId,
    pub layers: Vec<LayerParams>,
}

fn weight(fan_in: usize, fan_out: usize) -> ParamKind {
    ParamKind::Weight { fan_in, fan_out }
}

impl SeTransformer {
    pub fn register(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) -> Self {
        let d = cfg.d_model;
        let dn = cfg.head_dim();
        let ff = cfg.ff_dim();
        let mut reg = |name: String, r: usize, c: usize, kind: ParamKind| store.register(&name, r, c, kind, seed);
        let cls = reg("tf.cls".into(), 1, d, weight(1, d));
        let sep = reg("tf.sep".into(), 1, d, weight(1, d));
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let mut heads = |kind: &str, n: usize| -> Vec<HeadParams> {
                (0..n)
                    .map(|h| {
                        let p = format!("tf.layer{l}.{kind}{h}");
                        HeadParams {
                            wq: reg(format!("{p}.wq"), d, dn, weight(d, dn)),
                            wk: reg(format!("{p}.wk"), d, dn, weight(d, dn)),
                            wv: reg(format!("{p}.wv"), d, dn, weight(d, dn)),
                        }
                    })
                    .collect()
            };
            let local = heads("local", cfg.local_heads);
            let global = heads("global", cfg.global_heads);
            let p = format!("tf.layer{l}");
            layers.push(LayerParams {
                local,
                global,
                wu: reg(format!("{p}.wu"), d, d, weight(d, d)),
                ln1_gamma: reg(format!("{p}.ln1.scale"), 1, d, ParamKind::Constant(1.0)),
                ln1_beta: reg(format!("{p}.ln1.shift"), 1, d, ParamKind::Constant(0.0)),
                w1: reg(format!("{p}.ffn.w1"), d, ff, weight(d, ff)),
                b1: reg(format!("{p}.ffn.b1"), 1, ff, ParamKind::Constant(0.0)),
                w2: reg(format!("{p}.ffn.w2"), ff, d, weight(ff, d)),
                b2: reg(format!("{p}.ffn.b2"), 1, d, ParamKind::Constant(0.0)),
                ln2_gamma: reg(format!("{p}.ln2.scale"), 1, d, ParamKind::Constant(1.0)),
                ln2_beta: reg(format!("{p}.ln2.shift"), 1, d, ParamKind::Constant(0.0)),
            });
        }
        Self {
            d,
            head_dim: dn,
            cls,
            sep,
            layers,
        }
    }

    /// Packs per-job item rows (`n_i x d` each, central first) into the
    /// tuple sequence.
    pub fn build_tuple_sequence(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        items: &[Var],
        max_items: usize,
    ) -> (Var, TupleLayout) {
        let lengths: Vec<usize> = items.iter().map(|&v| tape.value(v).rows).collect();
        let layout = TupleLayout::new(max_items, lengths);
        let cls = tape.param(store, self.cls);
        let sep = tape.param(store, self.sep);
        let mut parts = Vec::with_capacity(items.len() * 4);
        for (&it, &n) in items.iter().zip(&layout.lengths) {
            parts.push(cls);
            parts.push(it);
            if n < max_items {
                parts.push(tape.constant(Mat::zeros(max_items - n, self.d)));
            }
            parts.push(sep);
        }
        (tape.concat_rows(&parts), layout)
    }

    pub fn encoder_layer(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        layer: usize,
        x: Var,
        local_mask: &Mask,
        global_mask: &Mask,
        ctx: &mut ForwardCtx,
    ) -> Var {
        let p = &self.layers[layer];
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(p.local.len() + p.global.len());
        let heads = p
            .local
            .iter()
            .map(|h| (h, false, local_mask))
            .chain(p.global.iter().map(|h| (h, true, global_mask)));
        for (i, (h, global, mask)) in heads.enumerate() {
            let wq = tape.param(store, h.wq);
            let wk = tape.param(store, h.wk);
            let wv = tape.param(store, h.wv);
            let q = tape.matmul(x, wq);
            let k = tape.matmul(x, wk);
            let v = tape.matmul(x, wv);
            let (out, probs) = attention_head(tape, q, k, v, Some(mask), scale);
            if let Some(att) = ctx.attention.as_mut() {
                att.push(HeadAttention {
                    layer,
                    head: i,
                    global,
                    probs: tape.value(probs).clone(),
                });
            }
            outs.push(out);
        }
        let merged = tape.concat_cols(&outs);
        let wu = tape.param(store, p.wu);
        let att = tape.matmul(merged, wu);
        let att = self.dropout(tape, att, ctx);
        let h = tape.add(x, att);
        let g1 = tape.param(store, p.ln1_gamma);
        let b1 = tape.param(store, p.ln1_beta);
        let h = tape.layer_norm(h, g1, b1, LN_EPS);

        let w1 = tape.param(store, p.w1);
        let fb1 = tape.param(store, p.b1);
        let w2 = tape.param(store, p.w2);
        let fb2 = tape.param(store, p.b2);
        let f = tape.matmul(h, w1);
        let f = tape.add_row(f, fb1);
        let f = tape.relu(f);
        let f = tape.matmul(f, w2);
        let f = tape.add_row(f, fb2);
        let f = self.dropout(tape, f, ctx);
        let out = tape.add(h, f);
        let g2 = tape.param(store, p.ln2_gamma);
        let b2 = tape.param(store, p.ln2_beta);
        tape.layer_norm(out, g2, b2, LN_EPS)
    }

    fn dropout(&self, tape: &mut Tape, x: Var, ctx: &mut ForwardCtx) -> Var {
        let n = tape.value(x).len();
        match ctx.dropout_mask(n) {
            Some(keep) => tape.dropout(x, keep),
            None => x,
        }
    }

    /// All layers over a packed sequence.
    pub fn encode_sequence(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        seq: Var,
        layout: &TupleLayout,
        ctx: &mut ForwardCtx,
    ) -> Var {
        let local = layout.local_mask();
        let global = layout.global_mask();
        let mut x = seq;
        for l in 0..self.layers.len() {
            x = self.encoder_layer(tape, store, l, x, &local, &global, ctx);
        }
        x
    }
}

/// Scaled dot-product attention under a mask; returns the outputs and the
/// attention probabilities.
pub fn attention_head(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Mask>,
    scale: f64,
) -> (Var, Var) {
    let a = tape.matmul_nt(q, k);
    let a = tape.scale(a, scale);
    let p = tape.softmax_rows(a, mask);
    (tape.matmul(p, v), p)
}

/// Item encoder plus transformer: everything needed to embed a tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct TupleEncoder {
    pub items: ItemEncoder,
    pub transformer: SeTransformer,
    pub max_items: usize,
}

/// Output of [`TupleEncoder::encode_tuple`].
#[derive(Debug, Clone)]
pub struct TupleEncoding {
    /// Final sequence, `seq_len x d`.
    pub sequence: Var,
    /// One `[CLS]` row per job, central first: `(L + 1) x d`.
    pub cls: Var,
    pub layout: TupleLayout,
}

impl TupleEncoding {
    /// Item rows of job `jd` (`n_jd x d`).
    pub fn item_rows(&self, tape: &mut Tape, jd: usize) -> Var {
        let start = self.layout.item_pos(jd, 0);
        tape.slice_rows(self.sequence, start, self.layout.lengths[jd])
    }
}

impl TupleEncoder {
    pub fn register(store: &mut ParamStore, vocab_size: usize, cfg: &ModelConfig, seed: u64) -> Self {
        Self {
            items: ItemEncoder::register(store, vocab_size, cfg.d_model, seed),
            transformer: SeTransformer::register(store, cfg, seed),
            max_items: cfg.max_items,
        }
    }

    /// Encodes a tuple. All items of the tuple form one batch-norm batch.
    pub fn encode_tuple(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tuple: &JdTuple<'_>,
        ctx: &mut ForwardCtx,
    ) -> Result<TupleEncoding> {
        let per_jd: Vec<&[TokenizedItem]> = tuple.members().map(|j| j.model_items(self.max_items)).collect();
        let flat: Vec<&TokenizedItem> = per_jd.iter().flat_map(|s| s.iter()).collect();
        let all = self.items.encode_items(tape, store, &flat, ctx)?;
        let mut start = 0;
        let mut blocks = Vec::with_capacity(per_jd.len());
        for s in &per_jd {
            blocks.push(tape.slice_rows(all, start, s.len()));
            start += s.len();
        }
        let (seq, layout) = self.transformer.build_tuple_sequence(tape, store, &blocks, self.max_items);
        let out = self.transformer.encode_sequence(tape, store, seq, &layout, ctx);
        let cls_ids = (0..layout.num_jds()).map(|j| Some(layout.cls_pos(j))).collect();
        let cls = tape.gather_rows(out, cls_ids);
        Ok(TupleEncoding {
            sequence: out,
            cls,
            layout,
        })
    }
}

/// `[CLS]` attention over a job's items, one row per head and layer, as
/// exported for inspection.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClsAttention {
    pub layer: usize,
    pub head: usize,
    pub global: bool,
    pub jd: usize,
    pub weights: Vec<f64>,
}

pub fn cls_item_attention(layout: &TupleLayout, heads: &[HeadAttention]) -> Vec<ClsAttention> {
    let mut out = Vec::new();
    for h in heads {
        for jd in 0..layout.num_jds() {
            let row = h.probs.row(layout.cls_pos(jd));
            let weights = (0..layout.lengths[jd]).map(|m| row[layout.item_pos(jd, m)]).collect();
            out.push(ClsAttention {
                layer: h.layer,
                head: h.head,
                global: h.global,
                jd,
                weights,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_params, random_mat};
    use crate::tensor::cosine;
    use crate::types::JobDescription;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(d: usize, nl: usize, ng: usize, layers: usize, m: usize) -> ModelConfig {
        ModelConfig {
            d_model: d,
            num_layers: layers,
            local_heads: nl,
            global_heads: ng,
            d_ff: 0,
            dropout: 0.0,
            max_items: m,
            num_neighbors: 2,
            bn_momentum: 0.9,
        }
    }

    fn jd(id: &str, rng: &mut ChaCha8Rng, n_items: usize, vocab: usize) -> JobDescription {
        let items = (0..n_items)
            .map(|_| TokenizedItem {
                token_ids: (0..rng.random_range(1..5)).map(|_| rng.random_range(2..vocab)).collect(),
            })
            .collect();
        JobDescription {
            jd_id: id.into(),
            title_id: 0,
            items,
            raw_items: vec![],
        }
    }

    fn encode(enc: &TupleEncoder, s: &ParamStore, jds: &[&JobDescription]) -> (Mat, TupleLayout) {
        let tuple = JdTuple {
            central: jds[0],
            neighbors: &jds[1..],
        };
        let mut t = Tape::new();
        let e = enc.encode_tuple(&mut t, s, &tuple, &mut ForwardCtx::eval()).unwrap();
        (t.value(e.sequence).clone(), e.layout)
    }

    #[test]
    fn layout_sizes_and_masks() {
        let l = TupleLayout::new(40, vec![40, 40, 40]);
        assert_eq!(l.seq_len(), 126);
        let l = TupleLayout::new(4, vec![2]);
        assert_eq!(l.local_mask(), l.global_mask());
        let l = TupleLayout::new(4, vec![1, 3]);
        let m = l.local_mask();
        let s = l.seq_len();
        let visible = (0..s).filter(|&k| m[k]).count();
        assert_eq!(visible, 3);
        let g = l.global_mask();
        assert_eq!((0..s).filter(|&k| g[k]).count(), 3 + 5);
        assert!(m[l.sep_pos(1) * s + l.cls_pos(1)]);
        assert!(!m[l.cls_pos(0) * s + l.cls_pos(1)]);
    }

    #[test]
    fn attention_matches_hand_softmax() {
        let q = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![1.0, 1.0]]);
        let k = Mat::from_rows(&[vec![1.0, 1.0], vec![2.0, 0.0], vec![0.0, -1.0]]);
        let v = Mat::from_rows(&[vec![3.0, 1.0], vec![-1.0, 2.0], vec![0.0, 4.0]]);
        let scale = 1.0 / 2f64.sqrt();
        let mut t = Tape::new();
        let (qv, kv, vv) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
        let (out, _) = attention_head(&mut t, qv, kv, vv, None, scale);
        let got = t.value(out).clone();
        for i in 0..3 {
            let logits: Vec<f64> = (0..3)
                .map(|j| (q.get(i, 0) * k.get(j, 0) + q.get(i, 1) * k.get(j, 1)) * scale)
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for c in 0..2 {
                let expect: f64 = (0..3).map(|j| logits[j].exp() / z * v.get(j, c)).sum();
                assert!((got.get(i, c) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_visible_key_and_uniform_mean() {
        let mut t = Tape::new();
        let q = t.constant(Mat::zeros(2, 3));
        let k = t.constant(Mat::zeros(3, 3));
        let v = t.constant(Mat::identity(3));
        let mask: Mask = Arc::new(vec![true, true, false, false, true, false]);
        let (out, _) = attention_head(&mut t, q, k, v, Some(&mask), 1.0);
        let o = t.value(out);
        assert_eq!(o.row(0), &[0.5, 0.5, 0.0]);
        assert_eq!(o.row(1), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn zero_values_reduce_layer_to_norms_and_ffn() {
        let c = cfg(4, 1, 1, 1, 2);
        let mut s = ParamStore::new();
        let tf = SeTransformer::register(&mut s, &c, 3);
        for h in tf.layers[0].local.iter().chain(&tf.layers[0].global) {
            s.set(h.wv, Mat::zeros(4, 2));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_mat(&mut rng, 3, 4, 1.0);
        let layout = TupleLayout::new(1, vec![1]);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let out = tf.encoder_layer(
            &mut t,
            &s,
            0,
            xv,
            &layout.local_mask(),
            &layout.global_mask(),
            &mut ForwardCtx::eval(),
        );
        let got = t.value(out).clone();

        fn ln(r: &[f64]) -> Vec<f64> {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            r.iter().map(|v| (v - mu) / (var + LN_EPS).sqrt()).collect()
        }
        let p = &tf.layers[0];
        let (w1, w2) = (s.value(p.w1), s.value(p.w2));
        for r in 0..3 {
            let h = ln(x.row(r));
            let hidden: Vec<f64> = (0..16)
                .map(|j| (0..4).map(|i| h[i] * w1.get(i, j)).sum::<f64>().max(0.0))
                .collect();
            let f: Vec<f64> = (0..4)
                .map(|j| (0..16).map(|i| hidden[i] * w2.get(i, j)).sum::<f64>())
                .collect();
            let sum: Vec<f64> = h.iter().zip(&f).map(|(a, b)| a + b).collect();
            let expect = ln(&sum);
            for (a, b) in got.row(r).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn train_mode_dropout_is_seeded() {
        let c = ModelConfig {
            dropout: 0.1,
            ..cfg(8, 1, 1, 1, 3)
        };
        let mut s = ParamStore::new();
        let enc = TupleEncoder::register(&mut s, 20, &c, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = jd("a", &mut rng, 2, 20);
        let b = jd("b", &mut rng, 3, 20);
        let run = |seed| {
            let mut t = Tape::new();
            let tuple = JdTuple {
                central: &a,
                neighbors: &[&b],
            };
            let mut ctx = ForwardCtx::train(0.1, seed);
            let e = enc.encode_tuple(&mut t, &s, &tuple, &mut ctx).unwrap();
            t.value(e.cls).clone()
        };
        assert_eq!(run(4), run(4));
        assert_ne!(run(4), run(5));
        let (x1, _) = encode(&enc, &s, &[&a, &b]);
        let (x2, _) = encode(&enc, &s, &[&a, &b]);
        assert_eq!(x1, x2);
    }

    #[test]
    fn local_only_ignores_neighbor_content() {
        let c = cfg(16, 4, 0, 2, 4);
        let mut s = ParamStore::new();
        let enc = TupleEncoder::register(&mut s, 30, &c, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let central = jd("c", &mut rng, 3, 30);
        let n1 = jd("n1", &mut rng, 2, 30);
        let n2 = jd("n2", &mut rng, 4, 30);
        let r1 = jd("r1", &mut rng, 2, 30);
        let r2 = jd("r2", &mut rng, 4, 30);
        let (x, l) = encode(&enc, &s, &[&central, &n1, &n2]);
        let (y, _) = encode(&enc, &s, &[&central, &r1, &r2]);
        assert_eq!(x.row(l.cls_pos(0)), y.row(l.cls_pos(0)));
        assert_ne!(x.row(l.cls_pos(1)), y.row(l.cls_pos(1)));
    }

    #[test]
    fn extra_padding_leaves_real_tokens_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = jd("a", &mut rng, 2, 30);
        let b = jd("b", &mut rng, 3, 30);
        let mut s = ParamStore::new();
        let enc = TupleEncoder::register(&mut s, 30, &cfg(16, 3, 1, 2, 3), 2);
        let (x, lx) = encode(&enc, &s, &[&a, &b]);
        let wide = TupleEncoder {
            max_items: 7,
            ..enc.clone()
        };
        let (y, ly) = encode(&wide, &s, &[&a, &b]);
        for j in 0..2 {
            let pairs = [(lx.cls_pos(j), ly.cls_pos(j)), (lx.sep_pos(j), ly.sep_pos(j))]
                .into_iter()
                .chain((0..lx.lengths[j]).map(|m| (lx.item_pos(j, m), ly.item_pos(j, m))));
            for (p, q) in pairs {
                for (u, v) in x.row(p).iter().zip(y.row(q)) {
                    assert!((u - v).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn neighbor_permutation_permutes_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c0 = jd("c", &mut rng, 3, 30);
        let a = jd("a", &mut rng, 2, 30);
        let b = jd("b", &mut rng, 4, 30);
        let mut s = ParamStore::new();
        let enc = TupleEncoder::register(&mut s, 30, &cfg(16, 3, 1, 2, 4), 6);
        let (x, l) = encode(&enc, &s, &[&c0, &a, &b]);
        let (y, _) = encode(&enc, &s, &[&c0, &b, &a]);
        let close = |p: usize, q: usize| x.row(p).iter().zip(y.row(q)).all(|(u, v)| (u - v).abs() <= 1e-6);
        let block = l.block();
        for off in 0..block {
            if l.token(off).1 {
                continue;
            }
            assert!(close(off, off));
        }
        for off in 0..block {
            let (p1, p2) = (block + off, 2 * block + off);
            if !l.token(p1).1 {
                assert!(close(p1, 2 * block + off));
            }
            if !l.token(p2).1 {
                assert!(close(p2, block + off));
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one_and_export() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = jd("a", &mut rng, 2, 30);
        let b = jd("b", &mut rng, 3, 30);
        let mut s = ParamStore::new();
        let enc = TupleEncoder::register(&mut s, 30, &cfg(16, 3, 1, 2, 4), 6);
        let mut t = Tape::new();
        let tuple = JdTuple {
            central: &a,
            neighbors: &[&b],
        };
        let mut ctx = ForwardCtx::eval().with_attention();
        let e = enc.encode_tuple(&mut t, &s, &tuple, &mut ctx).unwrap();
        let heads = ctx.attention.unwrap();
        assert_eq!(heads.len(), 8);
        for h in &heads {
            for r in 0..h.probs.rows {
                assert!((h.probs.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        let cls = cls_item_attention(&e.layout, &heads);
        assert_eq!(cls.len(), 16);
        assert_eq!(cls[1].weights.len(), 3);
    }

    #[test]
    fn global_heads_change_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let jds: Vec<JobDescription> = (0..3).map(|i| jd(&format!("j{i}"), &mut rng, 4, 40)).collect();
        let refs: Vec<&JobDescription> = jds.iter().collect();
        let mut s1 = ParamStore::new();
        let e1 = TupleEncoder::register(&mut s1, 40, &cfg(16, 6, 2, 2, 4), 1);
        let mut s2 = ParamStore::new();
        let e2 = TupleEncoder::register(&mut s2, 40, &cfg(16, 8, 0, 2, 4), 1);
        let (x, l) = encode(&e1, &s1, &refs);
        let (y, _) = encode(&e2, &s2, &refs);
        assert!(cosine(x.row(l.cls_pos(0)), y.row(l.cls_pos(0))) < 1.0 - 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let c = cfg(8, 1, 1, 1, 3);
        let mut s = ParamStore::new();
        let enc = TupleEncoder::register(&mut s, 20, &c, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = jd("a", &mut rng, 2, 20);
        let b = jd("b", &mut rng, 3, 20);
        let layout_len = 2 * 5;
        let w = random_mat(&mut rng, layout_len, 8, 1.0);
        let ids: Vec<ParamId> = s.ids().filter(|&id| s.is_trainable(id)).collect();
        let report = check_params(&s, &ids, 60, 1e-3, 5, |t, st| {
            let tuple = JdTuple {
                central: &a,
                neighbors: &[&b],
            };
            let mut ctx = ForwardCtx::train(0.0, 0);
            let e = enc.encode_tuple(t, st, &tuple, &mut ctx).unwrap();
            let wv = t.constant(w.clone());
            let z = t.mul(e.sequence, wv);
            t.sum(z)
        });
        assert!(report.max_rel_error() < 1e-4, "{:?}", report.worst());
    }
}
