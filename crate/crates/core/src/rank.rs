//! Ranking stage: cross-attention between a job embedding and a user's skill
//! distribution, a click head, and AUC / MRR.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::Mat;

pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct Ranker {
    pub d: usize,
    pub num_skills: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

impl Ranker {
    pub fn register(store: &mut ParamStore, d: usize, num_skills: usize, seed: u64) -> Self {
        let n = num_skills;
        let w = |i, o| ParamKind::Weight { fan_in: i, fan_out: o };
        Self {
            d,
            num_skills: n,
            wq: store.register("rank.wq", d, d, w(d, d), seed),
            wk: store.register("rank.wk", n, n, w(n, n), seed),
            wv: store.register("rank.wv", n, n, w(n, n), seed),
            fc1_w: store.register("rank.fc1.w", d, d, w(d, d), seed),
            fc1_b: store.register("rank.fc1.b", 1, d, ParamKind::Constant(0.0), seed),
            fc2_w: store.register("rank.fc2.w", d, 1, w(d, 1), seed),
            fc2_b: store.register("rank.fc2.b", 1, 1, ParamKind::Constant(0.0), seed),
        }
    }

    fn check(&self, cls: &[f64], user: &[f64]) -> Result<()> {
        if cls.len() != self.d || user.len() != self.num_skills {
            return Err(Error::Domain(format!(
                "ranker expects a {}-wide job embedding and {} skills, got {} and {}",
                self.d,
                self.num_skills,
                cls.len(),
                user.len()
            )));
        }
        Ok(())
    }

    /// Joint embedding `softmax(Q^T K) V^T` as a `1 x d` row, plus the
    /// `d x n` attention matrix.
    pub fn joint_embedding_term(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        cls: &[f64],
        user: &[f64],
    ) -> Result<(Var, Var)> {
        self.check(cls, user)?;
        let c = tape.constant(Mat::row_vec(cls.to_vec()));
        let y = tape.constant(Mat::row_vec(user.to_vec()));
        let wq = tape.param(store, self.wq);
        let wk = tape.param(store, self.wk);
        let wv = tape.param(store, self.wv);
        let q = tape.matmul(c, wq);
        let k = tape.matmul(y, wk);
        let v = tape.matmul(y, wv);
        let a = tape.matmul_tn(q, k);
        let att = tape.softmax_rows(a, None);
        let e = tape.matmul_nt(att, v);
        Ok((tape.transpose(e), att))
    }

    /// Pre-sigmoid click logit, `1 x 1`.
    pub fn logit_term(&self, tape: &mut Tape, store: &ParamStore, cls: &[f64], user: &[f64]) -> Result<Var> {
        let (e, _) = self.joint_embedding_term(tape, store, cls, user)?;
        let w1 = tape.param(store, self.fc1_w);
        let b1 = tape.param(store, self.fc1_b);
        let w2 = tape.param(store, self.fc2_w);
        let b2 = tape.param(store, self.fc2_b);
        let h = tape.matmul(e, w1);
        let h = tape.add_row(h, b1);
        let h = tape.relu(h);
        let z = tape.matmul(h, w2);
        Ok(tape.add_row(z, b2))
    }

    pub fn joint_embedding(&self, store: &ParamStore, cls: &[f64], user: &[f64]) -> Result<Vec<f64>> {
        let mut t = Tape::new();
        let (e, _) = self.joint_embedding_term(&mut t, store, cls, user)?;
        Ok(t.value(e).data.clone())
    }

    pub fn click_probability(&self, store: &ParamStore, cls: &[f64], user: &[f64]) -> Result<f64> {
        let mut t = Tape::new();
        let z = self.logit_term(&mut t, store, cls, user)?;
        let p = t.sigmoid(z);
        Ok(t.value(p).item())
    }

    /// Summed binary cross-entropy over `(cls, user, label)` examples.
    pub fn ctr_loss_term(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &[(&[f64], &[f64], u8)],
    ) -> Result<Var> {
        let mut logits = Vec::with_capacity(batch.len());
        for (cls, user, _) in batch {
            logits.push(self.logit_term(tape, store, cls, user)?);
        }
        let z = tape.concat_cols(&logits);
        let p = tape.sigmoid(z);
        let labels = batch.iter().map(|b| f64::from(b.2)).collect();
        Ok(tape.bce_sum(p, labels, BCE_EPS))
    }

    pub fn ctr_loss(&self, store: &ParamStore, batch: &[(&[f64], &[f64], u8)]) -> Result<f64> {
        let mut t = Tape::new();
        let v = self.ctr_loss_term(&mut t, store, batch)?;
        Ok(t.value(v).item())
    }
}

/// Summed BCE of given predictions, clamped at [`BCE_EPS`].
pub fn bce(preds: &[f64], labels: &[u8]) -> f64 {
    preds
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredClick {
    pub jd_id: String,
    pub score: f64,
    pub label: u8,
}

/// One user's scored candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankGroup {
    pub user_id: String,
    pub items: Vec<ScoredClick>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    /// Pooled over every positive-negative pair across users.
    pub auc: f64,
    /// Mean of per-user AUC over users with both labels.
    pub per_user_auc: f64,
    pub mrr: f64,
    /// Expected MRR of a uniformly random ordering of the same groups.
    pub random_mrr: f64,
    pub groups: usize,
    /// Users excluded from MRR because they have no positive.
    pub without_positive: Vec<String>,
}

/// Probability that a random positive outscores a random negative, ties 0.5.
/// `None` when either class is absent.
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    // Mid-ranks over tie blocks (Mann-Whitney U).
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] == 1 {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// 1-based rank of the first positive under descending score, ties by id.
pub fn first_positive_rank(items: &[ScoredClick]) -> Option<usize> {
    let mut order: Vec<&ScoredClick> = items.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.jd_id.cmp(&b.jd_id)));
    order.iter().position(|c| c.label == 1).map(|p| p + 1)
}

/// Expected reciprocal rank of the first positive when `p` of `n` items are
/// positive and the order is uniformly random.
pub fn random_reciprocal_rank(n: usize, p: usize) -> f64 {
    if p == 0 || n == 0 {
        return 0.0;
    }
    // P(first positive at r) = prod_{i<r} (n-p-i)/(n-i) * p/(n-r+1)
    let mut none_before = 1.0;
    let mut total = 0.0;
    for r in 1..=(n - p + 1) {
        let here = none_before * p as f64 / (n - r + 1) as f64;
        total += here / r as f64;
        none_before *= (n - p - (r - 1)) as f64 / (n - (r - 1)) as f64;
    }
    total
}

pub fn rank_metrics(groups: &[RankGroup]) -> RankReport {
    let mut all_scores = Vec::new();
    let mut all_labels = Vec::new();
    let mut per_user = Vec::new();
    let mut rr = Vec::new();
    let mut random = Vec::new();
    let mut without_positive = Vec::new();
    for g in groups {
        let s: Vec<f64> = g.items.iter().map(|c| c.score).collect();
        let l: Vec<u8> = g.items.iter().map(|c| c.label).collect();
        all_scores.extend_from_slice(&s);
        all_labels.extend_from_slice(&l);
        if let Some(a) = auc(&s, &l) {
            per_user.push(a);
        }
        match first_positive_rank(&g.items) {
            Some(r) => {
                rr.push(1.0 / r as f64);
                let p = l.iter().filter(|&&x| x == 1).count();
                random.push(random_reciprocal_rank(l.len(), p));
            }
            None => without_positive.push(g.user_id.clone()),
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    RankReport {
        auc: auc(&all_scores, &all_labels).unwrap_or(0.5),
        per_user_auc: mean(&per_user),
        mrr: mean(&rr),
        random_mrr: mean(&random),
        groups: groups.len(),
        without_positive,
    }
}

/// Candidates of one user ordered by click score, ties by id.
pub fn order_by_score(mut items: Vec<(String, f64)>) -> Vec<(String, f64)> {
    items.sort_by(|a, b| match b.1.total_cmp(&a.1) {
        Ordering::Equal => a.0.cmp(&b.0),
        o => o,
    });
    items
}
