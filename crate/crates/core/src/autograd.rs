//! A small reverse-mode automatic differentiation tape over [`Mat`].
//!
//! Nodes are appended in evaluation order, so a single reverse sweep is a
//! valid topological traversal. Parameters are bound once per tape as leaf
//! nodes; after [`Tape::backward`] their gradients are collected by
//! [`ParamId`].

use std::sync::Arc;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{dot, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean attention mask, row-major, `true` = key visible to the query.
pub type Mask = Arc<Vec<bool>>;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    MatMulTn(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<Option<usize>>,
    },
    Reshape(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SegmentMax {
        x: Var,
        argmax: Vec<usize>,
    },
    Dropout {
        x: Var,
        keep: Vec<f64>,
    },
    Transpose(Var),
    Pick {
        x: Var,
        idx: Vec<(usize, usize)>,
    },
    Sum(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    PairwiseKl {
        p: Var,
        pairs: Vec<(usize, usize)>,
        eps: f64,
    },
    PairwiseEuclid {
        x: Var,
        pairs: Vec<(usize, usize)>,
    },
    Kl {
        a: Var,
        b: Var,
        eps: f64,
    },
    BceSum {
        p: Var,
        labels: Vec<f64>,
        eps: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Evaluation tape. Values are computed eagerly as nodes are pushed.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: Vec<Option<Var>>,
    bindings: Vec<(ParamId, Var)>,
}

/// Gradients produced by one backward sweep.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, zeros of the right shape if nothing flowed into it.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| {
            let (r, c) = tape.value(v).shape();
            Mat::zeros(r, c)
        })
    }

    /// Gradients of every parameter bound to `tape`, in binding order.
    pub fn param_grads(&self, tape: &Tape) -> Vec<(ParamId, Mat)> {
        tape.bindings
            .iter()
            .filter_map(|&(id, v)| self.get(v).map(|g| (id, g.clone())))
            .collect()
    }
}

fn accum(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant leaf (no gradient).
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf that is not a stored parameter.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf for parameter `id`, created once per tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.bound.len() <= id.0 {
            self.bound.resize(id.0 + 1, None);
        }
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let trainable = store.is_trainable(id);
        let v = self.push(store.value(id).clone(), Op::Leaf, trainable);
        self.bound[id.0] = Some(v);
        if trainable {
            self.bindings.push((id, v));
        }
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMulNt(a, b), rg)
    }

    /// `a^T * b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_tn(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMulTn(a, b), rg)
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Mat {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        Mat::from_vec(
            x.rows,
            x.cols,
            x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |p, q| p + q);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |p, q| p - q);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |p, q| p * q);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    /// `a + bias` with `bias` a `1 x cols` row broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let x = self.value(a);
        let b = self.value(bias);
        assert_eq!((1, x.cols), b.shape(), "add_row bias shape");
        let mut v = x.clone();
        for r in 0..v.rows {
            for (o, &bb) in v.row_mut(r).iter_mut().zip(&b.data) {
                *o += bb;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        self.push(v, Op::AddRow(a, bias), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    /// Row-wise softmax. Masked entries (`false`) get probability zero.
    /// Every row must keep at least one visible entry.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&Mask>) -> Var {
        let x = self.value(a);
        let mut v = Mat::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            let row = x.row(r);
            let visible = |c: usize| mask.is_none_or(|m| m[r * x.cols + c]);
            let mut max = f64::NEG_INFINITY;
            for (c, &val) in row.iter().enumerate() {
                if visible(c) && val > max {
                    max = val;
                }
            }
            assert!(
                max > f64::NEG_INFINITY,
                "softmax row {r} has no visible entries"
            );
            let out = v.row_mut(r);
            let mut total = 0.0;
            for (c, &val) in row.iter().enumerate() {
                if visible(c) {
                    let e = (val - max).exp();
                    out[c] = e;
                    total += e;
                }
            }
            for o in out.iter_mut() {
                *o /= total;
            }
        }
        let rg = self.rg(a);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    /// Per-row layer normalisation with learned `1 x cols` scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (o, &v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let out = affine_cols(&xhat, self.value(gamma), self.value(beta));
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Batch normalisation using the statistics of the rows of `x`
    /// (per column). Returns the output together with the batch mean and
    /// biased variance so the caller can update running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> (Var, Vec<f64>, Vec<f64>) {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut mean = vec![0.0; cols];
        for r in 0..rows {
            for (m, &v) in mean.iter_mut().zip(xv.row(r)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= rows as f64;
        }
        let mut var = vec![0.0; cols];
        for r in 0..rows {
            for ((s, &v), &m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        for s in &mut var {
            *s /= rows as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Mat::zeros(rows, cols);
        for r in 0..rows {
            let src = xv.row(r);
            for (c, o) in xhat.row_mut(r).iter_mut().enumerate() {
                *o = (src[c] - mean[c]) * inv_std[c];
            }
        }
        let out = affine_cols(&xhat, self.value(gamma), self.value(beta));
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        (v, mean, var)
    }

    /// Batch normalisation with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Mat::zeros(rows, cols);
        for r in 0..rows {
            let src = xv.row(r);
            for (c, o) in xhat.row_mut(r).iter_mut().enumerate() {
                *o = (src[c] - mean[c]) * inv_std[c];
            }
        }
        let out = affine_cols(&xhat, self.value(gamma), self.value(beta));
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Row lookup into `table`; `None` yields a zero row.
    pub fn gather_rows(&mut self, table: Var, ids: Vec<Option<usize>>) -> Var {
        let t = self.value(table);
        let mut out = Mat::zeros(ids.len(), t.cols);
        for (r, id) in ids.iter().enumerate() {
            if let Some(id) = *id {
                out.row_mut(r).copy_from_slice(t.row(id));
            }
        }
        let rg = self.rg(table);
        self.push(out, Op::Gather { table, ids }, rg)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(x);
        assert_eq!(v.len(), rows * cols, "reshape size mismatch");
        let out = Mat::from_vec(rows, cols, v.data.clone());
        let rg = self.rg(x);
        self.push(out, Op::Reshape(x), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + v.cols].copy_from_slice(v.row(r));
            }
            off += v.cols;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols, cols, "concat_rows col mismatch");
            data.extend_from_slice(&v.data);
            rows += v.rows;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Mat::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, n: usize) -> Var {
        let out = self.value(x).slice_rows(start, n);
        let rg = self.rg(x);
        self.push(out, Op::SliceRows { x, start }, rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, n: usize) -> Var {
        let v = self.value(x);
        let mut out = Mat::zeros(v.rows, n);
        for r in 0..v.rows {
            out.row_mut(r).copy_from_slice(&v.row(r)[start..start + n]);
        }
        let rg = self.rg(x);
        self.push(out, Op::SliceCols { x, start }, rg)
    }

    /// Column-wise max over consecutive row segments. `lengths[i]` rows
    /// belong to segment `i`; output is `lengths.len() x cols`.
    pub fn segment_max(&mut self, x: Var, lengths: &[usize]) -> Var {
        let v = self.value(x);
        assert_eq!(lengths.iter().sum::<usize>(), v.rows, "segment lengths");
        let cols = v.cols;
        let mut out = Mat::zeros(lengths.len(), cols);
        let mut argmax = vec![0usize; lengths.len() * cols];
        let mut start = 0;
        for (s, &len) in lengths.iter().enumerate() {
            assert!(len > 0, "empty segment");
            for c in 0..cols {
                let mut best = start;
                for r in start + 1..start + len {
                    if v.get(r, c) > v.get(best, c) {
                        best = r;
                    }
                }
                argmax[s * cols + c] = best;
                out.set(s, c, v.get(best, c));
            }
            start += len;
        }
        let rg = self.rg(x);
        self.push(out, Op::SegmentMax { x, argmax }, rg)
    }

    /// Multiplies by a fixed keep-mask (already scaled by `1 / (1 - p)`).
    pub fn dropout(&mut self, x: Var, keep: Vec<f64>) -> Var {
        let v = self.value(x);
        assert_eq!(keep.len(), v.len(), "dropout mask size");
        let out = Mat::from_vec(
            v.rows,
            v.cols,
            v.data.iter().zip(&keep).map(|(a, k)| a * k).collect(),
        );
        let rg = self.rg(x);
        self.push(out, Op::Dropout { x, keep }, rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        let rg = self.rg(x);
        self.push(out, Op::Transpose(x), rg)
    }

    /// Selected elements as a `1 x idx.len()` row.
    pub fn pick(&mut self, x: Var, idx: Vec<(usize, usize)>) -> Var {
        let v = self.value(x);
        let out = Mat::row_vec(idx.iter().map(|&(r, c)| v.get(r, c)).collect());
        let rg = self.rg(x);
        self.push(out, Op::Pick { x, idx }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Mat::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    /// Each row divided by its L2 norm; all-zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mut out = v.clone();
        let mut norms = Vec::with_capacity(v.rows);
        for r in 0..v.rows {
            let n = dot(v.row(r), v.row(r)).sqrt();
            norms.push(n);
            if n > 0.0 {
                for o in out.row_mut(r) {
                    *o /= n;
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::L2NormalizeRows { x, norms }, rg)
    }

    /// `KL(p_a || p_b)` for each `(a, b)` in `pairs`, rows of `p` being
    /// distributions; `1 x pairs.len()`.
    pub fn pairwise_kl(&mut self, p: Var, pairs: Vec<(usize, usize)>, eps: f64) -> Var {
        let v = self.value(p);
        let out = Mat::row_vec(
            pairs
                .iter()
                .map(|&(a, b)| kl_value(v.row(a), v.row(b), eps))
                .collect(),
        );
        let rg = self.rg(p);
        self.push(out, Op::PairwiseKl { p, pairs, eps }, rg)
    }

    /// Euclidean distance between rows `a` and `b` for each pair.
    pub fn pairwise_euclid(&mut self, x: Var, pairs: Vec<(usize, usize)>) -> Var {
        let v = self.value(x);
        let out = Mat::row_vec(
            pairs
                .iter()
                .map(|&(a, b)| euclid(v.row(a), v.row(b)))
                .collect(),
        );
        let rg = self.rg(x);
        self.push(out, Op::PairwiseEuclid { x, pairs }, rg)
    }

    /// `sum_i a_i ln(a_i / b_i)` with both sides clamped below at `eps`
    /// inside the logarithm; zero entries of `a` contribute zero.
    pub fn kl(&mut self, a: Var, b: Var, eps: f64) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.len(), y.len(), "kl length mismatch");
        let out = Mat::scalar(kl_value(&x.data, &y.data, eps));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Kl { a, b, eps }, rg)
    }

    /// Summed binary cross-entropy with predictions clamped to `[eps, 1 - eps]`.
    pub fn bce_sum(&mut self, p: Var, labels: Vec<f64>, eps: f64) -> Var {
        let v = self.value(p);
        assert_eq!(v.len(), labels.len(), "bce label count");
        let loss: f64 = v
            .data
            .iter()
            .zip(&labels)
            .map(|(&q, &y)| {
                let q = q.clamp(eps, 1.0 - eps);
                -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
            })
            .sum();
        let rg = self.rg(p);
        self.push(Mat::scalar(loss), Op::BceSum { p, labels, eps }, rg)
    }

    /// Reverse sweep seeded with `d(out)/d(v) = g` for each `(v, g)`.
    pub fn backward(&self, seeds: &[(Var, Mat)]) -> Grads {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut top = 0;
        for (v, g) in seeds {
            assert_eq!(self.value(*v).shape(), g.shape(), "seed shape mismatch");
            accum(&mut grads, *v, g.clone());
            top = top.max(v.0 + 1);
        }
        for i in (0..top).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Grads { grads }
    }

    /// Backward from a scalar node with unit seed.
    pub fn backward_scalar(&self, loss: Var) -> Grads {
        self.backward(&[(loss, Mat::scalar(1.0))])
    }

    fn backward_node(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let need = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if need(*a) {
                    accum(grads, *a, g.matmul_nt(val(*b)));
                }
                if need(*b) {
                    accum(grads, *b, val(*a).matmul_tn(g));
                }
            }
            Op::MatMulNt(a, b) => {
                if need(*a) {
                    accum(grads, *a, g.matmul(val(*b)));
                }
                if need(*b) {
                    accum(grads, *b, g.matmul_tn(val(*a)));
                }
            }
            Op::MatMulTn(a, b) => {
                if need(*a) {
                    accum(grads, *a, val(*b).matmul_nt(g));
                }
                if need(*b) {
                    accum(grads, *b, val(*a).matmul(g));
                }
            }
            Op::Add(a, b) => {
                if need(*a) {
                    accum(grads, *a, g.clone());
                }
                if need(*b) {
                    accum(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if need(*a) {
                    accum(grads, *a, g.clone());
                }
                if need(*b) {
                    accum(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    accum(grads, *a, elementwise(g, val(*b), |p, q| p * q));
                }
                if need(*b) {
                    accum(grads, *b, elementwise(g, val(*a), |p, q| p * q));
                }
            }
            Op::AddRow(a, bias) => {
                if need(*a) {
                    accum(grads, *a, g.clone());
                }
                if need(*bias) {
                    accum(grads, *bias, column_sums(g));
                }
            }
            Op::Scale(a, s) => accum(grads, *a, g.map(|x| x * s)),
            Op::AddScalar(a) => accum(grads, *a, g.clone()),
            Op::Relu(a) => {
                let x = val(*a);
                accum(
                    grads,
                    *a,
                    elementwise(g, x, |gg, xx| if xx > 0.0 { gg } else { 0.0 }),
                );
            }
            Op::Sigmoid(a) => {
                accum(
                    grads,
                    *a,
                    elementwise(g, &node.value, |gg, y| gg * y * (1.0 - y)),
                );
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut gx = Mat::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let s = dot(yr, gr);
                    for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = yr[c] * (gr[c] - s);
                    }
                }
                accum(grads, *a, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gm = val(*gamma);
                if need(*gamma) {
                    accum(grads, *gamma, column_sums(&elementwise(g, xhat, |p, q| p * q)));
                }
                if need(*beta) {
                    accum(grads, *beta, column_sums(g));
                }
                if need(*x) {
                    let (rows, cols) = xhat.shape();
                    let mut gx = Mat::zeros(rows, cols);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let gh: Vec<f64> = gr.iter().zip(&gm.data).map(|(a, b)| a * b).collect();
                        let mean_gh = gh.iter().sum::<f64>() / cols as f64;
                        let mean_ghx = dot(&gh, xr) / cols as f64;
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = inv_std[r] * (gh[c] - mean_gh - xr[c] * mean_ghx);
                        }
                    }
                    accum(grads, *x, gx);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gm = val(*gamma);
                if need(*gamma) {
                    accum(grads, *gamma, column_sums(&elementwise(g, xhat, |p, q| p * q)));
                }
                if need(*beta) {
                    accum(grads, *beta, column_sums(g));
                }
                if need(*x) {
                    let (rows, cols) = xhat.shape();
                    let n = rows as f64;
                    let mut mean_gh = vec![0.0; cols];
                    let mut mean_ghx = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            let gh = g.get(r, c) * gm.data[c];
                            mean_gh[c] += gh / n;
                            mean_ghx[c] += gh * xhat.get(r, c) / n;
                        }
                    }
                    let mut gx = Mat::zeros(rows, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            let gh = g.get(r, c) * gm.data[c];
                            gx.set(
                                r,
                                c,
                                inv_std[c] * (gh - mean_gh[c] - xhat.get(r, c) * mean_ghx[c]),
                            );
                        }
                    }
                    accum(grads, *x, gx);
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gm = val(*gamma);
                if need(*gamma) {
                    accum(grads, *gamma, column_sums(&elementwise(g, xhat, |p, q| p * q)));
                }
                if need(*beta) {
                    accum(grads, *beta, column_sums(g));
                }
                if need(*x) {
                    let mut gx = g.clone();
                    for r in 0..gx.rows {
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o *= gm.data[c] * inv_std[c];
                        }
                    }
                    accum(grads, *x, gx);
                }
            }
            Op::Gather { table, ids } => {
                let t = val(*table);
                let mut gt = Mat::zeros(t.rows, t.cols);
                for (r, id) in ids.iter().enumerate() {
                    if let Some(id) = *id {
                        for (o, &gg) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *o += gg;
                        }
                    }
                }
                accum(grads, *table, gt);
            }
            Op::Reshape(x) => {
                let (r, c) = val(*x).shape();
                accum(grads, *x, Mat::from_vec(r, c, g.data.clone()));
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols;
                    if need(p) {
                        let mut gp = Mat::zeros(g.rows, w);
                        for r in 0..g.rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        accum(grads, p, gp);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = val(p).rows;
                    if need(p) {
                        accum(grads, p, g.slice_rows(off, h));
                    }
                    off += h;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = val(*x);
                let mut gx = Mat::zeros(xv.rows, xv.cols);
                let c = xv.cols;
                gx.data[start * c..start * c + g.len()].copy_from_slice(&g.data);
                accum(grads, *x, gx);
            }
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let mut gx = Mat::zeros(xv.rows, xv.cols);
                for r in 0..g.rows {
                    gx.row_mut(r)[*start..start + g.cols].copy_from_slice(g.row(r));
                }
                accum(grads, *x, gx);
            }
            Op::SegmentMax { x, argmax } => {
                let xv = val(*x);
                let mut gx = Mat::zeros(xv.rows, xv.cols);
                let cols = xv.cols;
                for s in 0..g.rows {
                    for c in 0..cols {
                        let r = argmax[s * cols + c];
                        gx.data[r * cols + c] += g.get(s, c);
                    }
                }
                accum(grads, *x, gx);
            }
            Op::Dropout { x, keep } => {
                accum(
                    grads,
                    *x,
                    Mat::from_vec(
                        g.rows,
                        g.cols,
                        g.data.iter().zip(keep).map(|(a, k)| a * k).collect(),
                    ),
                );
            }
            Op::Transpose(x) => accum(grads, *x, g.transpose()),
            Op::Pick { x, idx } => {
                let xv = val(*x);
                let mut gx = Mat::zeros(xv.rows, xv.cols);
                for (k, &(r, c)) in idx.iter().enumerate() {
                    gx.data[r * xv.cols + c] += g.data[k];
                }
                accum(grads, *x, gx);
            }
            Op::Sum(x) => {
                let (r, c) = val(*x).shape();
                accum(grads, *x, Mat::filled(r, c, g.item()));
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut gx = Mat::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    if norms[r] == 0.0 {
                        continue;
                    }
                    let s = dot(g.row(r), y.row(r));
                    let yr = y.row(r);
                    let gr = g.row(r);
                    for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = (gr[c] - yr[c] * s) / norms[r];
                    }
                }
                accum(grads, *x, gx);
            }
            Op::PairwiseKl { p, pairs, eps } => {
                let pv = val(*p);
                let mut gp = Mat::zeros(pv.rows, pv.cols);
                for (k, &(a, b)) in pairs.iter().enumerate() {
                    let gk = g.data[k];
                    for c in 0..pv.cols {
                        let (da, db) = kl_partials(pv.get(a, c), pv.get(b, c), *eps);
                        gp.data[a * pv.cols + c] += gk * da;
                        gp.data[b * pv.cols + c] += gk * db;
                    }
                }
                accum(grads, *p, gp);
            }
            Op::PairwiseEuclid { x, pairs } => {
                let xv = val(*x);
                let mut gx = Mat::zeros(xv.rows, xv.cols);
                for (k, &(a, b)) in pairs.iter().enumerate() {
                    let d = node.value.data[k];
                    if d == 0.0 {
                        continue;
                    }
                    let s = g.data[k] / d;
                    for c in 0..xv.cols {
                        let diff = xv.get(a, c) - xv.get(b, c);
                        gx.data[a * xv.cols + c] += s * diff;
                        gx.data[b * xv.cols + c] -= s * diff;
                    }
                }
                accum(grads, *x, gx);
            }
            Op::Kl { a, b, eps } => {
                let (av, bv) = (val(*a), val(*b));
                let gs = g.item();
                let mut ga = Mat::zeros(av.rows, av.cols);
                let mut gb = Mat::zeros(bv.rows, bv.cols);
                for i in 0..av.len() {
                    let (da, db) = kl_partials(av.data[i], bv.data[i], *eps);
                    ga.data[i] = gs * da;
                    gb.data[i] = gs * db;
                }
                if need(*a) {
                    accum(grads, *a, ga);
                }
                if need(*b) {
                    accum(grads, *b, gb);
                }
            }
            Op::BceSum { p, labels, eps } => {
                let pv = val(*p);
                let gs = g.item();
                let data = pv
                    .data
                    .iter()
                    .zip(labels)
                    .map(|(&q, &y)| {
                        if q <= *eps || q >= 1.0 - eps {
                            0.0
                        } else {
                            gs * (-y / q + (1.0 - y) / (1.0 - q))
                        }
                    })
                    .collect();
                accum(grads, *p, Mat::from_vec(pv.rows, pv.cols, data));
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `sum_i a_i (ln max(a_i, eps) - ln max(b_i, eps))`, skipping `a_i == 0`.
pub fn kl_value(a: &[f64], b: &[f64], eps: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            if x == 0.0 {
                0.0
            } else {
                x * (x.max(eps).ln() - y.max(eps).ln())
            }
        })
        .sum()
}

fn kl_partials(x: f64, y: f64, eps: f64) -> (f64, f64) {
    if x == 0.0 {
        // The term is identically zero at x = 0; its right derivative is
        // ln(eps) - ln(y) + [x > eps], which is what the clamp implies.
        return (eps.ln() - y.max(eps).ln(), 0.0);
    }
    let xc = x.max(eps);
    let yc = y.max(eps);
    let da = xc.ln() - yc.ln() + if x > eps { 1.0 } else { 0.0 };
    let db = if y > eps { -x / y } else { 0.0 };
    (da, db)
}

pub fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn elementwise(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    Mat::from_vec(
        a.rows,
        a.cols,
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn column_sums(g: &Mat) -> Mat {
    let mut out = Mat::zeros(1, g.cols);
    for r in 0..g.rows {
        for (o, &v) in out.data.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

fn affine_cols(xhat: &Mat, gamma: &Mat, beta: &Mat) -> Mat {
    let mut out = xhat.clone();
    for r in 0..out.rows {
        for (c, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = *o * gamma.data[c] + beta.data[c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_input_grad, random_mat};
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        random_mat(rng, r, c, 1.0)
    }

    #[test]
    fn matmul_family_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 4, 2);
        let w = rand_mat(&mut rng, 3, 2);
        check_input_grad(&a, |t, x| {
            let bv = t.constant(b.clone());
            let y = t.matmul(x, bv);
            let wv = t.constant(w.clone());
            let z = t.mul(y, wv);
            t.sum(z)
        });
        let bt = b.transpose();
        check_input_grad(&bt, |t, x| {
            let av = t.constant(a.clone());
            let y = t.matmul_nt(av, x);
            let wv = t.constant(w.clone());
            let z = t.mul(y, wv);
            t.sum(z)
        });
        let at = a.transpose();
        check_input_grad(&at, |t, x| {
            let bv = t.constant(b.clone());
            let y = t.matmul_tn(x, bv);
            let wv = t.constant(w.clone());
            let z = t.mul(y, wv);
            t.sum(z)
        });
    }

    #[test]
    fn normalisation_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_mat(&mut rng, 4, 5);
        let w = rand_mat(&mut rng, 4, 5);
        let gamma = Mat::row_vec(vec![1.2, -0.3, 0.7, 1.0, 0.5]);
        let beta = Mat::row_vec(vec![0.1, 0.2, -0.1, 0.0, 0.3]);
        check_input_grad(&x, |t, x| {
            let g = t.constant(gamma.clone());
            let b = t.constant(beta.clone());
            let y = t.layer_norm(x, g, b, 1e-5);
            let wv = t.constant(w.clone());
            let z = t.mul(y, wv);
            t.sum(z)
        });
        check_input_grad(&x, |t, x| {
            let g = t.constant(gamma.clone());
            let b = t.constant(beta.clone());
            let (y, _, _) = t.batch_norm_train(x, g, b, 1e-5);
            let wv = t.constant(w.clone());
            let z = t.mul(y, wv);
            t.sum(z)
        });
        check_input_grad(&x, |t, x| {
            let y = t.l2_normalize_rows(x);
            let wv = t.constant(w.clone());
            let z = t.mul(y, wv);
            t.sum(z)
        });
    }

    #[test]
    fn softmax_and_divergence_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_mat(&mut rng, 3, 4);
        let w = rand_mat(&mut rng, 3, 4);
        let mask: Mask = Arc::new(vec![
            true, false, true, true, true, true, false, false, false, true, true, true,
        ]);
        check_input_grad(&x, |t, x| {
            let y = t.softmax_rows(x, Some(&mask));
            let wv = t.constant(w.clone());
            let z = t.mul(y, wv);
            t.sum(z)
        });
        check_input_grad(&x, |t, x| {
            let p = t.softmax_rows(x, None);
            let d = t.pairwise_kl(p, vec![(0, 1), (1, 0), (2, 0), (1, 2)], 1e-12);
            let e = t.pairwise_euclid(x, vec![(0, 1), (2, 1)]);
            let s1 = t.sum(d);
            let s2 = t.sum(e);
            t.add(s1, s2)
        });
        check_input_grad(&x, |t, x| {
            let p = t.softmax_rows(x, None);
            let a = t.slice_rows(p, 0, 1);
            let b = t.slice_rows(p, 2, 1);
            t.kl(a, b, 1e-12)
        });
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_mat(&mut rng, 6, 3);
        let w = rand_mat(&mut rng, 2, 6);
        check_input_grad(&x, |t, x| {
            let seg = t.segment_max(x, &[2, 4]);
            let r = t.reshape(x, 3, 6);
            let rs = t.slice_rows(r, 1, 2);
            let cc = t.concat_cols(&[seg, rs]);
            let wv = t.constant(Mat::from_vec(2, 9, w.data.iter().cycle().take(18).copied().collect()));
            let z = t.mul(cc, wv);
            let sc = t.slice_cols(z, 2, 5);
            let tr = t.transpose(sc);
            let pk = t.pick(tr, vec![(0, 0), (4, 1), (2, 1)]);
            t.sum(pk)
        });
        check_input_grad(&x, |t, x| {
            let tab = t.gather_rows(x, vec![Some(2), None, Some(2), Some(5)]);
            let s = t.sigmoid(tab);
            let r = t.relu(x);
            let cr = t.concat_rows(&[s, r]);
            let sq = t.mul(cr, cr);
            t.sum(sq)
        });
    }

    #[test]
    fn bce_gradient_and_value() {
        let p = Mat::row_vec(vec![0.3, 0.8, 0.55]);
        check_input_grad(&p, |t, x| t.bce_sum(x, vec![1.0, 0.0, 1.0], 1e-7));
        let mut t = Tape::new();
        let v = t.constant(Mat::row_vec(vec![0.5, 0.5]));
        let l = t.bce_sum(v, vec![1.0, 0.0], 1e-7);
        assert!((t.value(l).item() - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn masked_softmax_rows_sum_to_one_and_zero_masked() {
        let mut t = Tape::new();
        let x = t.constant(Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 9.0]));
        let mask: Mask = Arc::new(vec![true, true, false, false, true, true]);
        let y = t.softmax_rows(x, Some(&mask));
        let v = t.value(y);
        assert_eq!(v.get(0, 2), 0.0);
        assert_eq!(v.get(1, 0), 0.0);
        for r in 0..2 {
            assert!((v.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
