//! Recall stage: skill-distribution head, training objective, neighbour
//! selection, candidate recall and Recall@K / NDCG@K.

use std::cmp::Ordering;

use rand::seq::index::sample;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{DataDims, ForwardCtx, ModelConfig};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::{cosine, Mat};
use crate::transformer::TupleEncoder;
use crate::types::{AuxUserInfo, JdTuple, SkillDistribution};

/// Clamp used inside every KL logarithm.
pub const KL_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecallLossConfig {
    pub lambda: f64,
    pub mu: f64,
    pub alpha: f64,
    /// Use `exp(-d)` instead of `exp(d)` in the relation energy.
    pub negate_distance: bool,
}

impl Default for RecallLossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            mu: 0.4,
            alpha: 0.2,
            negate_distance: false,
        }
    }
}

impl RecallLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.mu >= 0.0) {
            return Err(Error::Config("recall.lambda and recall.mu must be >= 0".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config("recall.alpha must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distance {
    Kl,
    Euclid,
}

/// Classifier `g` (d -> d -> C, softmax) and the user-side encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct RecallHead {
    pub num_skills: usize,
    pub num_positions: usize,
    pub max_level: usize,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub aux_w: ParamId,
    pub aux_b: ParamId,
}

impl RecallHead {
    pub fn register(store: &mut ParamStore, d: usize, dims: &DataDims, seed: u64) -> Self {
        let c = dims.num_skills;
        let p = dims.num_positions;
        let w = |i, o| ParamKind::Weight { fan_in: i, fan_out: o };
        Self {
            num_skills: c,
            num_positions: p,
            max_level: dims.max_level,
            w1: store.register("recall.g.w1", d, d, w(d, d), seed),
            b1: store.register("recall.g.b1", 1, d, ParamKind::Constant(0.0), seed),
            w2: store.register("recall.g.w2", d, c, w(d, c), seed),
            b2: store.register("recall.g.b2", 1, c, ParamKind::Constant(0.0), seed),
            aux_w: store.register("recall.aux.w", p + 1, d, w(p + 1, d), seed),
            aux_b: store.register("recall.aux.b", 1, d, ParamKind::Constant(0.0), seed),
        }
    }

    /// Skill distributions for each row of `cls`.
    pub fn predict(&self, tape: &mut Tape, store: &ParamStore, cls: Var) -> Var {
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        let h = tape.matmul(cls, w1);
        let h = tape.add_row(h, b1);
        let h = tape.relu(h);
        let z = tape.matmul(h, w2);
        let z = tape.add_row(z, b2);
        tape.softmax_rows(z, None)
    }

    /// One-hot position followed by `level / max_level`.
    pub fn aux_features(&self, aux: &[&AuxUserInfo]) -> Result<Mat> {
        let p = self.num_positions;
        let mut m = Mat::zeros(aux.len(), p + 1);
        let denom = self.max_level.max(1) as f64;
        for (r, a) in aux.iter().enumerate() {
            if a.position_name_id >= p {
                return Err(Error::Domain(format!(
                    "position_name_id {} outside the {p} known positions",
                    a.position_name_id
                )));
            }
            m.set(r, a.position_name_id, 1.0);
            m.set(r, p, a.position_level as f64 / denom);
        }
        Ok(m)
    }

    pub fn encode_aux(&self, tape: &mut Tape, store: &ParamStore, aux: &[&AuxUserInfo]) -> Result<Var> {
        let x = tape.constant(self.aux_features(aux)?);
        let w = tape.param(store, self.aux_w);
        let b = tape.param(store, self.aux_b);
        let h = tape.matmul(x, w);
        Ok(tape.add_row(h, b))
    }
}

/// `KL(y || p)` with `p` clamped at [`KL_EPS`].
pub fn kl_distribution_loss(y: &SkillDistribution, p: &SkillDistribution) -> Result<f64> {
    if y.len() != p.len() {
        return Err(Error::Domain(format!(
            "distribution lengths differ: {} vs {}",
            y.len(),
            p.len()
        )));
    }
    Ok(crate::autograd::kl_value(y.as_slice(), p.as_slice(), KL_EPS))
}

/// Bidirectional hinge with the hardest in-batch negative per direction,
/// summed over the batch. Row `i` of `aui` and `cls` is a matched pair.
pub fn skill_correlation_term(tape: &mut Tape, aui: Var, cls: Var, alpha: f64) -> Result<Var> {
    let b = tape.value(aui).rows;
    if b < 2 || tape.value(cls).rows != b {
        return Err(Error::Contract(format!(
            "skill correlation needs matched batches of at least 2 rows, got {b} and {}",
            tape.value(cls).rows
        )));
    }
    let na = tape.l2_normalize_rows(aui);
    let nc = tape.l2_normalize_rows(cls);
    let sim = tape.matmul_nt(na, nc);
    let s = tape.value(sim);
    let hardest = |f: &dyn Fn(usize) -> f64, skip: usize| -> usize {
        let mut best = usize::MAX;
        let mut best_v = f64::NEG_INFINITY;
        for j in 0..b {
            if j != skip && (best == usize::MAX || f(j) > best_v) {
                best = j;
                best_v = f(j);
            }
        }
        best
    };
    let mut diag = Vec::with_capacity(b);
    let mut neg_cls = Vec::with_capacity(b);
    let mut neg_aui = Vec::with_capacity(b);
    for i in 0..b {
        diag.push((i, i));
        neg_cls.push((i, hardest(&|j| s.get(i, j), i)));
        neg_aui.push((hardest(&|j| s.get(j, i), i), i));
    }
    let d = tape.pick(sim, diag);
    let mut total = None;
    for negs in [neg_cls, neg_aui] {
        let n = tape.pick(sim, negs);
        let h = tape.sub(n, d);
        let h = tape.add_scalar(h, alpha);
        let h = tape.relu(h);
        let h = tape.sum(h);
        total = Some(match total {
            None => h,
            Some(t) => tape.add(t, h),
        });
    }
    Ok(total.expect("two directions"))
}

pub fn skill_correlation_loss(aui: &Mat, cls: &Mat, alpha: f64) -> Result<f64> {
    let mut t = Tape::new();
    let a = t.constant(aui.clone());
    let c = t.constant(cls.clone());
    let v = skill_correlation_term(&mut t, a, c, alpha)?;
    Ok(t.value(v).item())
}

/// Ordered pairs `(n1, n2)`, `n1 != n2`, row-major.
pub fn ordered_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(n * n.saturating_sub(1));
    for a in 0..n {
        for b in 0..n {
            if a != b {
                out.push((a, b));
            }
        }
    }
    out
}

/// Flat softmax of pairwise distances between the rows of `x`.
pub fn relation_energy_term(tape: &mut Tape, x: Var, distance: Distance, negate: bool) -> Result<Var> {
    let n = tape.value(x).rows;
    if n < 2 {
        return Err(Error::Contract(format!("relation energy needs at least 2 vectors, got {n}")));
    }
    let pairs = ordered_pairs(n);
    let d = match distance {
        Distance::Kl => tape.pairwise_kl(x, pairs, KL_EPS),
        Distance::Euclid => tape.pairwise_euclid(x, pairs),
    };
    let d = if negate { tape.scale(d, -1.0) } else { d };
    Ok(tape.softmax_rows(d, None))
}

pub fn relation_energy(vectors: &Mat, distance: Distance, negate: bool) -> Result<Vec<f64>> {
    if distance == Distance::Kl {
        for r in 0..vectors.rows {
            SkillDistribution::new(vectors.row(r).to_vec())?;
        }
    }
    let mut t = Tape::new();
    let x = t.constant(vectors.clone());
    let v = relation_energy_term(&mut t, x, distance, negate)?;
    Ok(t.value(v).data.clone())
}

/// `KL(Phi_kl(preds) || Phi_euclid(reps))`.
pub fn relation_consistency_term(tape: &mut Tape, preds: Var, reps: Var, negate: bool) -> Result<Var> {
    let (np, nr) = (tape.value(preds).rows, tape.value(reps).rows);
    if np != nr {
        return Err(Error::Domain(format!("{np} predictions for {nr} representations")));
    }
    let target = relation_energy_term(tape, preds, Distance::Kl, negate)?;
    let model = relation_energy_term(tape, reps, Distance::Euclid, negate)?;
    Ok(tape.kl(target, model, KL_EPS))
}

pub fn relation_consistency_loss(preds: &[SkillDistribution], reps: &Mat, negate: bool) -> Result<f64> {
    if preds.len() != reps.rows {
        return Err(Error::Domain(format!(
            "{} predictions for {} representations",
            preds.len(),
            reps.rows
        )));
    }
    let rows: Vec<Vec<f64>> = preds.iter().map(|p| p.probs.clone()).collect();
    let mut t = Tape::new();
    let p = t.constant(Mat::from_rows(&rows));
    let r = t.constant(reps.clone());
    let v = relation_consistency_term(&mut t, p, r, negate)?;
    Ok(t.value(v).item())
}

/// Per-tuple part of the objective given the tuple's `[CLS]` rows
/// (central first): `KL(y || g(cls_0)) + mu * R`.
#[derive(Debug, Clone, Copy)]
pub struct TupleLoss {
    pub local: Var,
    pub kl: Var,
    pub relation: Option<Var>,
}

pub fn tuple_loss(
    tape: &mut Tape,
    store: &ParamStore,
    head: &RecallHead,
    cls: Var,
    target: &SkillDistribution,
    cfg: &RecallLossConfig,
) -> Result<TupleLoss> {
    if target.len() != head.num_skills {
        return Err(Error::Domain(format!(
            "target has {} skills, head predicts {}",
            target.len(),
            head.num_skills
        )));
    }
    let preds = head.predict(tape, store, cls);
    let central = tape.slice_rows(preds, 0, 1);
    let y = tape.constant(Mat::row_vec(target.probs.clone()));
    let kl = tape.kl(y, central, KL_EPS);
    let n = tape.value(cls).rows;
    if n < 2 || cfg.mu == 0.0 {
        return Ok(TupleLoss {
            local: kl,
            kl,
            relation: None,
        });
    }
    let r = relation_consistency_term(tape, preds, cls, cfg.negate_distance)?;
    let weighted = tape.scale(r, cfg.mu);
    Ok(TupleLoss {
        local: tape.add(kl, weighted),
        kl,
        relation: Some(r),
    })
}

/// Batch part: `lambda * M` over the central `[CLS]` rows.
pub fn batch_correlation_loss(
    tape: &mut Tape,
    store: &ParamStore,
    head: &RecallHead,
    central_cls: Var,
    aux: &[&AuxUserInfo],
    cfg: &RecallLossConfig,
) -> Result<Var> {
    let aui = head.encode_aux(tape, store, aux)?;
    let m = skill_correlation_term(tape, aui, central_cls, cfg.alpha)?;
    Ok(tape.scale(m, cfg.lambda))
}

/// One training example: a tuple plus the central job's holder.
#[derive(Debug, Clone)]
pub struct RecallExample<'a> {
    pub tuple: JdTuple<'a>,
    pub target: &'a SkillDistribution,
    pub aux: &'a AuxUserInfo,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub kl: f64,
    pub correlation: f64,
    pub relation: f64,
}

/// The complete objective over `batch`, built from `[CLS]` rows that are
/// already on `tape`, one `(L + 1) x d` block per example.
pub fn loss_from_cls(
    tape: &mut Tape,
    store: &ParamStore,
    head: &RecallHead,
    cls: &[Var],
    batch: &[(&SkillDistribution, &AuxUserInfo)],
    cfg: &RecallLossConfig,
) -> Result<(Var, LossParts)> {
    let mut parts = LossParts::default();
    let mut total: Option<Var> = None;
    let mut centrals = Vec::with_capacity(cls.len());
    for (&c, &(target, _)) in cls.iter().zip(batch) {
        let t = tuple_loss(tape, store, head, c, target, cfg)?;
        parts.kl += tape.value(t.kl).item();
        if let Some(r) = t.relation {
            parts.relation += tape.value(r).item();
        }
        total = Some(match total {
            None => t.local,
            Some(acc) => tape.add(acc, t.local),
        });
        centrals.push(tape.slice_rows(c, 0, 1));
    }
    let mut total = total.ok_or_else(|| Error::Contract("empty recall batch".into()))?;
    let central = tape.concat_rows(&centrals);
    let aux: Vec<&AuxUserInfo> = batch.iter().map(|b| b.1).collect();
    let m = batch_correlation_loss(tape, store, head, central, &aux, cfg)?;
    parts.correlation = if cfg.lambda == 0.0 {
        0.0
    } else {
        tape.value(m).item() / cfg.lambda
    };
    if cfg.lambda != 0.0 {
        total = tape.add(total, m);
    }
    parts.total = tape.value(total).item();
    Ok((total, parts))
}

/// Encoder plus head: the full recall model.
#[derive(Debug, Clone, PartialEq)]
pub struct RecallModel {
    pub config: ModelConfig,
    pub dims: DataDims,
    pub encoder: TupleEncoder,
    pub head: RecallHead,
}

impl RecallModel {
    pub fn register(store: &mut ParamStore, cfg: &ModelConfig, dims: &DataDims, seed: u64) -> Self {
        Self {
            config: cfg.clone(),
            dims: *dims,
            encoder: TupleEncoder::register(store, dims.vocab_size, cfg, seed),
            head: RecallHead::register(store, cfg.d_model, dims, seed),
        }
    }

    pub fn total_recall_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &[RecallExample<'_>],
        cfg: &RecallLossConfig,
        ctx: &mut ForwardCtx,
    ) -> Result<(Var, LossParts)> {
        let mut cls = Vec::with_capacity(batch.len());
        for ex in batch {
            cls.push(self.encoder.encode_tuple(tape, store, &ex.tuple, ctx)?.cls);
        }
        let targets: Vec<_> = batch.iter().map(|e| (e.target, e.aux)).collect();
        loss_from_cls(tape, store, &self.head, &cls, &targets, cfg)
    }

    /// Eval-mode `[CLS]` rows and skill predictions for a tuple.
    pub fn predict_tuple(&self, store: &ParamStore, tuple: &JdTuple<'_>) -> Result<(Mat, Mat)> {
        let mut t = Tape::new();
        let enc = self.encoder.encode_tuple(&mut t, store, tuple, &mut ForwardCtx::eval())?;
        let p = self.head.predict(&mut t, store, enc.cls);
        Ok((t.value(enc.cls).clone(), t.value(p).clone()))
    }
}

/// A job available for neighbour search.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry<'a> {
    pub jd_id: &'a str,
    pub title_id: usize,
    pub embedding: &'a [f64],
}

/// Indices into `pool` of the `l` nearest same-title jobs (ties by id),
/// topped up with the nearest other-title jobs when too few share the title.
/// Entries with the query's own id are skipped.
pub fn select_neighbors(
    query_id: &str,
    query_title: usize,
    query: &[f64],
    pool: &[PoolEntry<'_>],
    l: usize,
) -> Result<Vec<usize>> {
    if pool.is_empty() {
        return Err(Error::Contract("neighbour pool is empty".into()));
    }
    let mut ranked: Vec<(bool, f64, &str, usize)> = pool
        .iter()
        .enumerate()
        .filter(|(_, e)| e.jd_id != query_id)
        .map(|(i, e)| {
            (
                e.title_id != query_title,
                crate::autograd::euclid(query, e.embedding),
                e.jd_id,
                i,
            )
        })
        .collect();
    ranked.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(a.1.total_cmp(&b.1))
            .then_with(|| a.2.cmp(b.2))
    });
    Ok(ranked.into_iter().take(l).map(|r| r.3).collect())
}

/// A scored candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub jd_id: String,
    pub score: f64,
}

fn by_score(a: (f64, &str), b: (f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Top-`k` pool entries by cosine to the user's distribution, ties by id.
pub fn recall_candidates(user: &[f64], pool: &[(&str, &[f64])], k: usize) -> Result<Vec<Scored>> {
    if k < 1 {
        return Err(Error::Domain("K must be at least 1".into()));
    }
    if pool.is_empty() {
        return Err(Error::Contract("candidate pool is empty".into()));
    }
    let mut scored: Vec<(f64, &str)> = pool.iter().map(|(id, p)| (cosine(user, p), *id)).collect();
    scored.sort_by(|a, b| by_score(*a, *b));
    Ok(scored
        .into_iter()
        .take(k)
        .map(|(score, id)| Scored {
            jd_id: id.to_string(),
            score,
        })
        .collect())
}

/// 1-based rank of the positive among itself and the negatives under the
/// same ordering as [`recall_candidates`].
pub fn positive_rank(pos: (f64, &str), negatives: impl IntoIterator<Item = (f64, String)>) -> usize {
    1 + negatives
        .into_iter()
        .filter(|(s, id)| by_score((*s, id.as_str()), pos) == Ordering::Less)
        .count()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallAtK {
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
}

/// Recall@K and NDCG@K from the positive's rank for each user.
pub fn recall_metrics(ranks: &[usize], ks: &[usize]) -> Vec<RecallAtK> {
    let n = ranks.len().max(1) as f64;
    ks.iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|&&r| r <= k).count() as f64;
            let dcg: f64 = ranks
                .iter()
                .filter(|&&r| r <= k)
                .map(|&r| 1.0 / ((1 + r) as f64).log2())
                .sum();
            RecallAtK {
                k,
                recall: hits / n,
                ndcg: dcg / n,
            }
        })
        .collect()
}

/// Evaluation case: the positive job and sampled negatives, as job indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCase {
    pub user: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Samples `negatives` distinct jobs other than the positive for each
/// `(user, positive)`, from `0..num_jds`.
pub fn sample_eval_cases(pairs: &[(usize, usize)], num_jds: usize, negatives: usize, seed: u64) -> Result<Vec<EvalCase>> {
    if num_jds < negatives + 1 {
        return Err(Error::Domain(format!(
            "{negatives} negatives requested from {num_jds} jobs"
        )));
    }
    Ok(pairs
        .iter()
        .enumerate()
        .map(|(i, &(user, positive))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let negatives = sample(&mut rng, num_jds - 1, negatives)
                .into_iter()
                .map(|j| if j >= positive { j + 1 } else { j })
                .collect();
            EvalCase {
                user,
                positive,
                negatives,
            }
        })
        .collect())
}

/// Rank of the positive for one user, scoring by cosine with `preds[j]`.
pub fn case_rank(case: &EvalCase, user: &[f64], preds: &[Vec<f64>], ids: &[String]) -> usize {
    let pos = (cosine(user, &preds[case.positive]), ids[case.positive].as_str());
    positive_rank(
        pos,
        case.negatives
            .iter()
            .map(|&j| (cosine(user, &preds[j]), ids[j].clone())),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRank {
    pub user_id: String,
    pub positive: String,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub metrics: Vec<RecallAtK>,
    pub per_user: Vec<UserRank>,
}

impl RecallReport {
    pub fn at(&self, k: usize) -> Option<&RecallAtK> {
        self.metrics.iter().find(|m| m.k == k)
    }
}

/// Candidate list handed to the ranking stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub user_id: String,
    pub candidates: Vec<Scored>,
}
