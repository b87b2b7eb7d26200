//! Training and evaluation of both stages.
//!
//! A recall step runs in three phases so that tuples can be processed
//! independently while the in-batch ranking term still sees the whole batch:
//!
//! 1. per tuple: encode, predict, and build `KL + mu * R` on its own tape;
//! 2. one small tape over the central `[CLS]` rows (as inputs) and the
//!    user-side encoder computes `lambda * M`;
//! 3. per tuple: backward seeded with 1 on the local loss and with the
//!    phase-2 gradient on its central `[CLS]` row.
//!
//! Gradients are then summed in tuple order, so results do not depend on
//! how phases 1 and 3 are scheduled.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint::{Checkpoint, CheckpointMeta, Stage};
use crate::config::RunConfig;
use crate::dataset::{validate_dataset, Dataset, PairIdx, Split};
use crate::error::{Error, Result};
use crate::model::{apply_bn_observations, BnObservation, DataDims, ForwardCtx};
use crate::optim::{annealed_lr, Adam, AdamConfig};
use crate::parallel::{par_map, Workers};
use crate::params::{GradStore, ParamStore};
use crate::rank::{order_by_score, rank_metrics, RankGroup, RankReport, Ranker, ScoredClick};
use crate::recall::{
    batch_correlation_loss, case_rank, recall_candidates, recall_metrics, sample_eval_cases, select_neighbors,
    tuple_loss, CandidateSet, EvalCase, LossParts, PoolEntry, RecallModel, RecallReport, UserRank,
};
use crate::tensor::Mat;
use crate::transformer::{cls_item_attention, ClsAttention};
use crate::types::{AuxUserInfo, JdTuple, JobDescription, SkillDistribution};

const DOM_SHUFFLE: u64 = 0x5348_5546;
const DOM_DROPOUT: u64 = 0x4452_4f50;
const DOM_NEIGHBORS: u64 = 0x4e45_4947;
const DOM_EVAL: u64 = 0x4556_414c;
const DOM_RANK: u64 = 0x5241_4e4b;

/// Folds several integers into one seed (splitmix64 finaliser per part).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243F_6A88_85A3_08D3;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// One line of the per-epoch log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: Stage,
    pub epoch: usize,
    pub lr: f64,
    pub batches: usize,
    pub train_loss: f64,
    /// Loss components summed over the epoch (recall stage only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<LossParts>,
    pub metrics: BTreeMap<String, f64>,
}

/// Shuffled index batches for one epoch. A final partial batch is kept when
/// it holds at least two tuples.
pub fn make_recall_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    assert!(batch_size >= 2, "batch_size must be >= 2");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, DOM_SHUFFLE, epoch as u64])));
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

pub fn recall_dims(ds: &Dataset, train: &[PairIdx]) -> DataDims {
    DataDims {
        vocab_size: ds.vocab.len(),
        num_skills: ds.num_skills(),
        num_positions: ds.num_positions(),
        max_level: train
            .iter()
            .map(|p| ds.users[p.user].profile.aux_info.position_level)
            .max()
            .unwrap_or(0),
    }
}

fn check_dataset(ds: &Dataset) -> Result<()> {
    let report = validate_dataset(ds);
    if let Some(v) = report.violations.first() {
        return Err(Error::Domain(format!(
            "dataset has {} violations; first: {}: {}",
            report.violations.len(),
            v.record,
            v.message
        )));
    }
    Ok(())
}

/// Random same-title neighbours from `pool` for every job, topped up from
/// other titles when needed.
pub fn random_neighbors(ds: &Dataset, pool: &[usize], l: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut by_title: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &j in pool {
        by_title.entry(ds.jds[j].title_id).or_default().push(j);
    }
    (0..ds.jds.len())
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, DOM_NEIGHBORS, i as u64]));
            let same: Vec<usize> = by_title
                .get(&ds.jds[i].title_id)
                .map(|v| v.iter().copied().filter(|&j| j != i).collect())
                .unwrap_or_default();
            let take = l.min(same.len());
            let mut chosen: Vec<usize> = sample(&mut rng, same.len(), take).into_iter().map(|k| same[k]).collect();
            if chosen.len() < l {
                let rest: Vec<usize> = pool
                    .iter()
                    .copied()
                    .filter(|&j| j != i && !chosen.contains(&j))
                    .collect();
                let extra = (l - chosen.len()).min(rest.len());
                chosen.extend(sample(&mut rng, rest.len(), extra).into_iter().map(|k| rest[k]));
            }
            chosen
        })
        .collect()
}

/// `[CLS]` embedding of each job encoded on its own.
pub fn solo_embeddings(
    model: &RecallModel,
    store: &ParamStore,
    ds: &Dataset,
    jds: &[usize],
    workers: Workers,
) -> Result<Vec<Vec<f64>>> {
    par_map(jds, workers, |_, &j| {
        let tuple = JdTuple {
            central: &ds.jds[j],
            neighbors: &[],
        };
        model.predict_tuple(store, &tuple).map(|(cls, _)| cls.row(0).to_vec())
    })
    .into_iter()
    .collect()
}

/// Nearest same-title neighbours from `pool` for each job in `queries`.
pub fn nearest_neighbors(
    model: &RecallModel,
    store: &ParamStore,
    ds: &Dataset,
    pool: &[usize],
    queries: &[usize],
    l: usize,
    workers: Workers,
) -> Result<Vec<Vec<usize>>> {
    if l == 0 {
        return Ok(vec![Vec::new(); queries.len()]);
    }
    let pool_emb = solo_embeddings(model, store, ds, pool, workers)?;
    let query_emb = solo_embeddings(model, store, ds, queries, workers)?;
    let entries: Vec<PoolEntry> = pool
        .iter()
        .zip(&pool_emb)
        .map(|(&j, e)| PoolEntry {
            jd_id: &ds.jds[j].jd_id,
            title_id: ds.jds[j].title_id,
            embedding: e,
        })
        .collect();
    par_map(queries, workers, |k, &q| {
        let jd = &ds.jds[q];
        select_neighbors(&jd.jd_id, jd.title_id, &query_emb[k], &entries, l)
            .map(|idx| idx.into_iter().map(|i| pool[i]).collect())
    })
    .into_iter()
    .collect()
}

fn tuple_refs<'a>(ds: &'a Dataset, neighbors: &[usize]) -> Vec<&'a JobDescription> {
    neighbors.iter().map(|&j| &ds.jds[j]).collect()
}

/// Eval-mode central `[CLS]` rows and skill predictions for every job.
pub fn predict_all(
    model: &RecallModel,
    store: &ParamStore,
    ds: &Dataset,
    neighbors: &[Vec<usize>],
    workers: Workers,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let idx: Vec<usize> = (0..ds.jds.len()).collect();
    let out: Vec<Result<(Vec<f64>, Vec<f64>)>> = par_map(&idx, workers, |_, &j| {
        let refs = tuple_refs(ds, &neighbors[j]);
        let tuple = JdTuple {
            central: &ds.jds[j],
            neighbors: &refs,
        };
        let (cls, preds) = model.predict_tuple(store, &tuple)?;
        Ok((preds.row(0).to_vec(), cls.row(0).to_vec()))
    });
    let mut preds = Vec::with_capacity(out.len());
    let mut cls = Vec::with_capacity(out.len());
    for r in out {
        let (p, c) = r?;
        preds.push(p);
        cls.push(c);
    }
    Ok((preds, cls))
}

/// Sampled-negative evaluation cases for held-out pairs.
pub fn recall_eval_cases(ds: &Dataset, test: &[PairIdx], negatives: usize, seed: u64) -> Result<Vec<EvalCase>> {
    let pairs: Vec<(usize, usize)> = test.iter().map(|p| (p.user, p.jd)).collect();
    sample_eval_cases(&pairs, ds.jds.len(), negatives, mix_seed(&[seed, DOM_EVAL]))
}

pub fn evaluate_recall_cases(ds: &Dataset, preds: &[Vec<f64>], cases: &[EvalCase], ks: &[usize]) -> RecallReport {
    let ids: Vec<String> = ds.jds.iter().map(|j| j.jd_id.clone()).collect();
    let ranks: Vec<usize> = cases
        .iter()
        .map(|c| case_rank(c, &ds.users[c.user].profile.skills.probs, preds, &ids))
        .collect();
    RecallReport {
        metrics: recall_metrics(&ranks, ks),
        per_user: cases
            .iter()
            .zip(&ranks)
            .map(|(c, &rank)| UserRank {
                user_id: ds.users[c.user].profile.user_id.clone(),
                positive: ids[c.positive].clone(),
                rank,
            })
            .collect(),
    }
}

/// Top-`k` jobs from the whole pool for each listed user.
pub fn candidate_sets(ds: &Dataset, preds: &[Vec<f64>], users: &[usize], k: usize) -> Result<Vec<CandidateSet>> {
    let pool: Vec<(&str, &[f64])> = ds
        .jds
        .iter()
        .zip(preds)
        .map(|(j, p)| (j.jd_id.as_str(), p.as_slice()))
        .collect();
    users
        .iter()
        .map(|&u| {
            Ok(CandidateSet {
                user_id: ds.users[u].profile.user_id.clone(),
                candidates: recall_candidates(&ds.users[u].profile.skills.probs, &pool, k)?,
            })
        })
        .collect()
}

/// Everything needed to run or resume the recall model.
#[derive(Debug, Clone)]
pub struct RecallState {
    pub config: RunConfig,
    pub model: RecallModel,
    pub store: ParamStore,
    pub adam: Adam,
    /// Neighbour job indices per job of the dataset.
    pub neighbors: Vec<Vec<usize>>,
    pub train_jds: Vec<usize>,
    pub epoch: usize,
}

/// A training example by index.
#[derive(Debug, Clone, Copy)]
struct Example<'a> {
    central: &'a JobDescription,
    target: &'a SkillDistribution,
    aux: &'a AuxUserInfo,
}

struct Forward {
    tape: Tape,
    cls: Var,
    local: Var,
    central: Vec<f64>,
    kl: f64,
    relation: f64,
    observations: Vec<BnObservation>,
}

impl RecallState {
    pub fn new(config: &RunConfig, ds: &Dataset, train: &[PairIdx]) -> Self {
        let dims = recall_dims(ds, train);
        let mut store = ParamStore::new();
        let model = RecallModel::register(&mut store, &config.model, &dims, config.train.seed);
        let adam = Adam::new(&store, AdamConfig::default());
        let train_jds: Vec<usize> = train.iter().map(|p| p.jd).collect::<BTreeSet<_>>().into_iter().collect();
        let neighbors = random_neighbors(ds, &train_jds, config.model.num_neighbors, config.train.seed);
        Self {
            config: config.clone(),
            model,
            store,
            adam,
            neighbors,
            train_jds,
            epoch: 0,
        }
    }

    fn workers(&self) -> Workers {
        Workers(self.config.train.workers)
    }

    /// Re-selects every job's neighbours by `[CLS]` distance under the
    /// current parameters.
    pub fn refresh_neighbors(&mut self, ds: &Dataset) -> Result<()> {
        let all: Vec<usize> = (0..ds.jds.len()).collect();
        self.neighbors = nearest_neighbors(
            &self.model,
            &self.store,
            ds,
            &self.train_jds,
            &all,
            self.config.model.num_neighbors,
            self.workers(),
        )?;
        Ok(())
    }

    /// One optimiser step over the pairs in `batch`.
    pub fn step(&mut self, ds: &Dataset, batch: &[PairIdx], epoch: usize, batch_idx: usize, lr: f64) -> Result<LossParts> {
        let examples: Vec<Example> = batch
            .iter()
            .map(|p| Example {
                central: &ds.jds[p.jd],
                target: &ds.users[p.user].profile.skills,
                aux: &ds.users[p.user].profile.aux_info,
            })
            .collect();
        let neighbor_refs: Vec<Vec<&JobDescription>> =
            batch.iter().map(|p| tuple_refs(ds, &self.neighbors[p.jd])).collect();
        let cfg = &self.config;
        let model = &self.model;
        let store = &self.store;
        let seed = cfg.train.seed;

        let forwards: Vec<Forward> = par_map(&examples, self.workers(), |i, ex| {
            let mut tape = Tape::new();
            let dseed = mix_seed(&[seed, DOM_DROPOUT, epoch as u64, batch_idx as u64, i as u64]);
            let mut ctx = ForwardCtx::train(cfg.model.dropout, dseed);
            let tuple = JdTuple {
                central: ex.central,
                neighbors: &neighbor_refs[i],
            };
            let enc = model.encoder.encode_tuple(&mut tape, store, &tuple, &mut ctx)?;
            let tl = tuple_loss(&mut tape, store, &model.head, enc.cls, ex.target, &cfg.recall)?;
            Ok(Forward {
                central: tape.value(enc.cls).row(0).to_vec(),
                kl: tape.value(tl.kl).item(),
                relation: tl.relation.map_or(0.0, |r| tape.value(r).item()),
                cls: enc.cls,
                local: tl.local,
                tape,
                observations: ctx.bn_observations,
            })
        })
        .into_iter()
        .collect::<Result<_>>()?;

        let mut btape = Tape::new();
        let centrals = btape.input(Mat::from_rows(
            &forwards.iter().map(|f| f.central.clone()).collect::<Vec<_>>(),
        ));
        let aux: Vec<&AuxUserInfo> = examples.iter().map(|e| e.aux).collect();
        let m = batch_correlation_loss(&mut btape, store, &model.head, centrals, &aux, &cfg.recall)?;
        let m_value = btape.value(m).item();
        let bgrads = btape.backward_scalar(m);
        let g_central = bgrads.get_or_zeros(&btape, centrals);

        let mut parts = LossParts {
            correlation: if cfg.recall.lambda == 0.0 { 0.0 } else { m_value / cfg.recall.lambda },
            ..LossParts::default()
        };
        let mut total = m_value;
        for f in &forwards {
            total += f.tape.value(f.local).item();
            parts.kl += f.kl;
            parts.relation += f.relation;
        }
        parts.total = total;
        if !total.is_finite() {
            let detail: Vec<String> = forwards
                .iter()
                .zip(batch)
                .map(|(f, p)| {
                    format!(
                        "{}/{} kl={} rel={}",
                        ds.jds[p.jd].jd_id, ds.users[p.user].profile.user_id, f.kl, f.relation
                    )
                })
                .collect();
            return Err(Error::NonFinite {
                epoch,
                batch: batch_idx,
                detail: format!("loss={total} correlation={m_value} tuples=[{}]", detail.join(", ")),
            });
        }

        let per_tuple = par_map(&forwards, self.workers(), |i, f| {
            let (rows, cols) = f.tape.value(f.cls).shape();
            let mut seed_cls = Mat::zeros(rows, cols);
            seed_cls.row_mut(0).copy_from_slice(g_central.row(i));
            let g = f.tape.backward(&[(f.local, Mat::scalar(1.0)), (f.cls, seed_cls)]);
            g.param_grads(&f.tape)
        });
        let mut grads = GradStore::new();
        for g in per_tuple {
            grads.extend(g);
        }
        grads.extend(bgrads.param_grads(&btape));
        if !grads.all_finite() {
            return Err(Error::NonFinite {
                epoch,
                batch: batch_idx,
                detail: "non-finite gradient".into(),
            });
        }

        self.adam.update(&mut self.store, &grads, lr);
        for f in &forwards {
            apply_bn_observations(&mut self.store, &f.observations, cfg.model.bn_momentum);
        }
        Ok(parts)
    }

    pub fn predict_all(&self, ds: &Dataset) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        predict_all(&self.model, &self.store, ds, &self.neighbors, self.workers())
    }

    pub fn to_checkpoint(&self, ds: &Dataset, metrics: BTreeMap<String, f64>) -> Checkpoint {
        let id = |j: usize| ds.jds[j].jd_id.clone();
        let meta = CheckpointMeta {
            stage: Stage::Recall,
            epoch: self.epoch,
            fingerprint: self.config.fingerprint(),
            config: self.config.clone(),
            dims: self.model.dims,
            vocab: ds.vocab.tokens().to_vec(),
            neighbors: self
                .neighbors
                .iter()
                .enumerate()
                .map(|(j, n)| (id(j), n.iter().map(|&k| id(k)).collect()))
                .collect(),
            train_jds: self.train_jds.iter().map(|&j| id(j)).collect(),
            adam_step: 0,
            adam: AdamConfig::default(),
            metrics,
            tensors: Vec::new(),
        };
        Checkpoint::pack(meta, &self.store, &self.adam)
    }

    /// Restores a recall model against `ds`. Jobs unknown to the checkpoint
    /// get neighbours chosen by the restored model.
    pub fn from_checkpoint(ck: &Checkpoint, ds: &Dataset) -> Result<Self> {
        ck.expect_stage(Stage::Recall)?;
        let config = ck.meta.config.clone();
        let dims = ck.meta.dims;
        check_compat(&ck.meta, ds)?;
        let mut store = ParamStore::new();
        let model = RecallModel::register(&mut store, &config.model, &dims, config.train.seed);
        let adam = ck.unpack_into(&mut store)?;
        let index = ds.jd_index();
        let train_jds: Vec<usize> = ck.meta.train_jds.iter().filter_map(|id| index.get(id.as_str()).copied()).collect();
        let mut state = Self {
            config,
            model,
            store,
            adam,
            neighbors: vec![Vec::new(); ds.jds.len()],
            train_jds,
            epoch: ck.meta.epoch,
        };
        let mut missing = Vec::new();
        for (j, jd) in ds.jds.iter().enumerate() {
            let known = ck.meta.neighbors.get(&jd.jd_id).and_then(|ids| {
                ids.iter().map(|id| index.get(id.as_str()).copied()).collect::<Option<Vec<_>>>()
            });
            match known {
                Some(n) => state.neighbors[j] = n,
                None => missing.push(j),
            }
        }
        if !missing.is_empty() {
            if state.train_jds.is_empty() {
                state.train_jds = (0..ds.jds.len()).collect();
            }
            let found = nearest_neighbors(
                &state.model,
                &state.store,
                ds,
                &state.train_jds,
                &missing,
                state.config.model.num_neighbors,
                state.workers(),
            )?;
            for (j, n) in missing.into_iter().zip(found) {
                state.neighbors[j] = n;
            }
        }
        Ok(state)
    }
}

fn check_compat(meta: &CheckpointMeta, ds: &Dataset) -> Result<()> {
    if meta.dims.num_skills != ds.num_skills() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} skills, dataset has {}",
            meta.dims.num_skills,
            ds.num_skills()
        )));
    }
    if meta.vocab.as_slice() != ds.vocab.tokens() {
        return Err(Error::Checkpoint("dataset vocabulary differs from the checkpoint's".into()));
    }
    Ok(())
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome<R> {
    /// Checkpoint with the best held-out selection metric.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: Vec<EpochLog>,
    /// Held-out report of the final model.
    pub report: Option<R>,
}

fn recall_metric_map(r: &RecallReport) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    for x in &r.metrics {
        m.insert(format!("recall@{}", x.k), x.recall);
        m.insert(format!("ndcg@{}", x.k), x.ndcg);
    }
    m
}

pub fn recall_split(cfg: &RunConfig, ds: &Dataset) -> Split {
    Split::new(&ds.pairs(), cfg.train.test_fraction, cfg.train.seed)
}

/// Trains the recall stage. `progress` sees every epoch's log line as soon
/// as it is produced.
pub fn train_recall(
    cfg: &RunConfig,
    ds: &Dataset,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<(TrainOutcome<RecallReport>, RecallState)> {
    cfg.validate()?;
    check_dataset(ds)?;
    let split = recall_split(cfg, ds);
    if split.train.len() < 2 {
        return Err(Error::Domain(format!(
            "recall training needs at least 2 training pairs, found {}",
            split.train.len()
        )));
    }
    let tc = &cfg.train;
    let mut state = RecallState::new(cfg, ds, &split.train);
    let cases = if split.test.is_empty() {
        Vec::new()
    } else {
        recall_eval_cases(ds, &split.test, tc.recall_negatives, tc.seed)?
    };
    let mut log = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut report = None;
    for epoch in 0..tc.max_epochs {
        let lr = annealed_lr(tc.lr, tc.lr_anneal_factor, tc.lr_anneal_every, epoch);
        let batches = make_recall_batches(split.train.len(), tc.batch_size, tc.seed, epoch);
        let mut sum = LossParts::default();
        for (b, idx) in batches.iter().enumerate() {
            let pairs: Vec<PairIdx> = idx.iter().map(|&i| split.train[i]).collect();
            let p = state.step(ds, &pairs, epoch, b, lr)?;
            sum.total += p.total;
            sum.kl += p.kl;
            sum.correlation += p.correlation;
            sum.relation += p.relation;
        }
        state.epoch = epoch + 1;
        if epoch == 0 {
            state.refresh_neighbors(ds)?;
        }
        let mut metrics = BTreeMap::new();
        if !cases.is_empty() {
            let (preds, _) = state.predict_all(ds)?;
            let r = evaluate_recall_cases(ds, &preds, &cases, &tc.eval_ks);
            metrics = recall_metric_map(&r);
            report = Some(r);
        }
        let entry = EpochLog {
            stage: Stage::Recall,
            epoch,
            lr,
            batches: batches.len(),
            train_loss: sum.total / batches.len().max(1) as f64,
            components: Some(sum),
            metrics: metrics.clone(),
        };
        progress(&entry);
        log.push(entry);
        let score = metrics.get(&format!("recall@{}", tc.select_k)).copied().unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, state.to_checkpoint(ds, metrics.clone())));
        }
    }
    let last_metrics = log.last().map(|l| l.metrics.clone()).unwrap_or_default();
    let last = state.to_checkpoint(ds, last_metrics);
    Ok((
        TrainOutcome {
            best: best.map(|b| b.1).unwrap_or_else(|| last.clone()),
            last,
            log,
            report,
        },
        state,
    ))
}

/// A user's labelled impressions.
#[derive(Debug, Clone, PartialEq)]
pub struct UserClicks {
    pub user: usize,
    pub clicked: Vec<usize>,
    pub unclicked: Vec<usize>,
}

pub fn group_clicks(ds: &Dataset) -> Vec<UserClicks> {
    let jd_index = ds.jd_index();
    let user_index = ds.user_index();
    let mut by_user: BTreeMap<usize, UserClicks> = BTreeMap::new();
    for c in &ds.clicks {
        let (Some(&u), Some(&j)) = (user_index.get(c.user_id.as_str()), jd_index.get(c.jd_id.as_str())) else {
            continue;
        };
        let g = by_user.entry(u).or_insert_with(|| UserClicks {
            user: u,
            clicked: Vec::new(),
            unclicked: Vec::new(),
        });
        if c.label == 1 {
            g.clicked.push(j);
        } else {
            g.unclicked.push(j);
        }
    }
    by_user.into_values().collect()
}

/// Train / held-out partition of users with clicks.
pub fn rank_split(cfg: &RunConfig, ds: &Dataset) -> (Vec<UserClicks>, Vec<UserClicks>) {
    let groups = group_clicks(ds);
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.train.seed, DOM_RANK])));
    let n_test = ((groups.len() as f64) * cfg.train.test_fraction).round() as usize;
    let n_test = n_test.min(groups.len().saturating_sub(1));
    let test: BTreeSet<usize> = order[..n_test].iter().copied().collect();
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (i, g) in groups.into_iter().enumerate() {
        if test.contains(&i) {
            held.push(g);
        } else {
            train.push(g);
        }
    }
    (train, held)
}

/// Each click with `negatives` sampled non-clicked jobs (impressions first,
/// then any other job), shuffled. Returns `(jd, user, label)`.
pub fn rank_examples(groups: &[UserClicks], num_jds: usize, negatives: usize, seed: u64, epoch: usize) -> Vec<(usize, usize, u8)> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, DOM_RANK, epoch as u64]));
    let mut out = Vec::new();
    for g in groups {
        for &pos in &g.clicked {
            out.push((pos, g.user, 1));
            let take = negatives.min(g.unclicked.len());
            for k in sample(&mut rng, g.unclicked.len(), take) {
                out.push((g.unclicked[k], g.user, 0));
            }
            let mut extra = negatives - take;
            let mut guard = 0;
            while extra > 0 && guard < 100 * negatives {
                guard += 1;
                let j = rng.random_range(0..num_jds);
                if !g.clicked.contains(&j) && !g.unclicked.contains(&j) {
                    out.push((j, g.user, 0));
                    extra -= 1;
                }
            }
        }
    }
    out.shuffle(&mut rng);
    out
}

#[derive(Debug, Clone)]
pub struct RankState {
    pub config: RunConfig,
    pub dims: DataDims,
    pub ranker: Ranker,
    pub store: ParamStore,
    pub adam: Adam,
    pub epoch: usize,
}

impl RankState {
    pub fn new(config: &RunConfig, dims: DataDims) -> Self {
        let mut store = ParamStore::new();
        let ranker = Ranker::register(&mut store, config.model.d_model, dims.num_skills, config.train.seed);
        let adam = Adam::new(&store, AdamConfig::default());
        Self {
            config: config.clone(),
            dims,
            ranker,
            store,
            adam,
            epoch: 0,
        }
    }

    pub fn step(&mut self, ds: &Dataset, cls: &[Vec<f64>], batch: &[(usize, usize, u8)], epoch: usize, b: usize, lr: f64) -> Result<f64> {
        let rows: Vec<(&[f64], &[f64], u8)> = batch
            .iter()
            .map(|&(j, u, y)| (cls[j].as_slice(), ds.users[u].profile.skills.probs.as_slice(), y))
            .collect();
        let mut tape = Tape::new();
        let loss = self.ranker.ctr_loss_term(&mut tape, &self.store, &rows)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                batch: b,
                detail: format!("ctr loss={value} over {} examples", batch.len()),
            });
        }
        let mut grads = GradStore::new();
        grads.extend(tape.backward_scalar(loss).param_grads(&tape));
        self.adam.update(&mut self.store, &grads, lr);
        Ok(value)
    }

    pub fn score(&self, cls: &[f64], user: &[f64]) -> Result<f64> {
        self.ranker.click_probability(&self.store, cls, user)
    }

    pub fn score_groups(&self, ds: &Dataset, cls: &[Vec<f64>], groups: &[UserClicks]) -> Result<Vec<RankGroup>> {
        par_map(groups, Workers(self.config.train.workers), |_, g| {
            let user = &ds.users[g.user].profile;
            let mut items = Vec::with_capacity(g.clicked.len() + g.unclicked.len());
            for (list, label) in [(&g.clicked, 1u8), (&g.unclicked, 0u8)] {
                for &j in list {
                    items.push(ScoredClick {
                        jd_id: ds.jds[j].jd_id.clone(),
                        score: self.score(&cls[j], &user.skills.probs)?,
                        label,
                    });
                }
            }
            Ok(RankGroup {
                user_id: user.user_id.clone(),
                items,
            })
        })
        .into_iter()
        .collect()
    }

    pub fn to_checkpoint(&self, ds: &Dataset, metrics: BTreeMap<String, f64>) -> Checkpoint {
        let meta = CheckpointMeta {
            stage: Stage::Rank,
            epoch: self.epoch,
            fingerprint: self.config.fingerprint(),
            config: self.config.clone(),
            dims: self.dims,
            vocab: ds.vocab.tokens().to_vec(),
            neighbors: BTreeMap::new(),
            train_jds: Vec::new(),
            adam_step: 0,
            adam: AdamConfig::default(),
            metrics,
            tensors: Vec::new(),
        };
        Checkpoint::pack(meta, &self.store, &self.adam)
    }

    pub fn from_checkpoint(ck: &Checkpoint, ds: &Dataset) -> Result<Self> {
        ck.expect_stage(Stage::Rank)?;
        check_compat(&ck.meta, ds)?;
        let mut state = Self::new(&ck.meta.config, ck.meta.dims);
        state.adam = ck.unpack_into(&mut state.store)?;
        state.epoch = ck.meta.epoch;
        Ok(state)
    }
}

fn rank_metric_map(r: &RankReport) -> BTreeMap<String, f64> {
    BTreeMap::from([
        ("auc".to_string(), r.auc),
        ("per_user_auc".to_string(), r.per_user_auc),
        ("mrr".to_string(), r.mrr),
        ("random_mrr".to_string(), r.random_mrr),
    ])
}

/// Trains the ranking stage on top of a frozen recall model.
pub fn train_rank(
    cfg: &RunConfig,
    ds: &Dataset,
    recall: &RecallState,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<(TrainOutcome<RankReport>, RankState)> {
    cfg.validate()?;
    check_dataset(ds)?;
    if recall.model.dims.num_skills != ds.num_skills() {
        return Err(Error::Checkpoint(format!(
            "recall model has {} skills, dataset has {}",
            recall.model.dims.num_skills,
            ds.num_skills()
        )));
    }
    if recall.config.model.d_model != cfg.model.d_model {
        return Err(Error::Config(format!(
            "model.d_model = {} differs from the recall model's {}",
            cfg.model.d_model, recall.config.model.d_model
        )));
    }
    let (train, held) = rank_split(cfg, ds);
    if train.iter().all(|g| g.clicked.is_empty()) {
        return Err(Error::Domain("no positive clicks among training users".into()));
    }
    let (_, cls) = recall.predict_all(ds)?;
    let tc = &cfg.train;
    let mut state = RankState::new(cfg, recall.model.dims);
    let mut log = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut report = None;
    for epoch in 0..tc.max_epochs {
        let lr = annealed_lr(tc.lr, tc.lr_anneal_factor, tc.lr_anneal_every, epoch);
        let examples = rank_examples(&train, ds.jds.len(), tc.rank_negatives, tc.seed, epoch);
        let mut total = 0.0;
        let mut n = 0;
        for (b, chunk) in examples.chunks(tc.batch_size).enumerate() {
            total += state.step(ds, &cls, chunk, epoch, b, lr)?;
            n += 1;
        }
        state.epoch = epoch + 1;
        let mut metrics = BTreeMap::new();
        if !held.is_empty() {
            let r = rank_metrics(&state.score_groups(ds, &cls, &held)?);
            metrics = rank_metric_map(&r);
            report = Some(r);
        }
        let entry = EpochLog {
            stage: Stage::Rank,
            epoch,
            lr,
            batches: n,
            train_loss: total / n.max(1) as f64,
            components: None,
            metrics: metrics.clone(),
        };
        progress(&entry);
        log.push(entry);
        let score = metrics.get("auc").copied().unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, state.to_checkpoint(ds, metrics.clone())));
        }
    }
    let last = state.to_checkpoint(ds, log.last().map(|l| l.metrics.clone()).unwrap_or_default());
    Ok((
        TrainOutcome {
            best: best.map(|b| b.1).unwrap_or_else(|| last.clone()),
            last,
            log,
            report,
        },
        state,
    ))
}

/// Click-scored groups for evaluation. With `candidates`, each user's group
/// is their candidate list, unclicked or unseen jobs counting as negatives;
/// otherwise it is their labelled impressions.
pub fn rank_eval_groups(
    ds: &Dataset,
    users: &[UserClicks],
    candidates: Option<&[CandidateSet]>,
) -> Result<Vec<UserClicks>> {
    let Some(cands) = candidates else {
        return Ok(users.to_vec());
    };
    let jd_index = ds.jd_index();
    let user_index = ds.user_index();
    let clicks: BTreeMap<usize, &UserClicks> = users.iter().map(|g| (g.user, g)).collect();
    let mut out = Vec::new();
    for set in cands {
        let u = *user_index
            .get(set.user_id.as_str())
            .ok_or_else(|| Error::NotFound(format!("user_id {}", set.user_id)))?;
        let Some(g) = clicks.get(&u) else { continue };
        let mut clicked = Vec::new();
        let mut unclicked = Vec::new();
        for c in &set.candidates {
            let j = *jd_index
                .get(c.jd_id.as_str())
                .ok_or_else(|| Error::NotFound(format!("jd_id {}", c.jd_id)))?;
            if g.clicked.contains(&j) {
                clicked.push(j);
            } else {
                unclicked.push(j);
            }
        }
        out.push(UserClicks {
            user: u,
            clicked,
            unclicked,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendedJob {
    pub jd_id: String,
    pub recall_score: f64,
    pub click_score: f64,
    /// `[CLS]` attention over this job's items, per layer and head.
    pub attention: Vec<ClsAttention>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub user_id: String,
    pub jobs: Vec<RecommendedJob>,
}

/// Recall `k` candidates for a user, then order them by click probability.
pub fn recommend(
    recall: &RecallState,
    rank: &RankState,
    ds: &Dataset,
    user_id: &str,
    k: usize,
) -> Result<Recommendation> {
    let u = *ds
        .user_index()
        .get(user_id)
        .ok_or_else(|| Error::NotFound(format!("user_id {user_id}")))?;
    let user = &ds.users[u].profile;
    let (preds, cls) = recall.predict_all(ds)?;
    let sets = candidate_sets(ds, &preds, &[u], k)?;
    let jd_index = ds.jd_index();
    let mut scored = Vec::new();
    let mut recall_scores = BTreeMap::new();
    for c in &sets[0].candidates {
        let j = jd_index[c.jd_id.as_str()];
        scored.push((c.jd_id.clone(), rank.score(&cls[j], &user.skills.probs)?));
        recall_scores.insert(c.jd_id.clone(), c.score);
    }
    let mut jobs = Vec::new();
    for (jd_id, click_score) in order_by_score(scored) {
        let j = jd_index[jd_id.as_str()];
        let refs = tuple_refs(ds, &recall.neighbors[j]);
        let tuple = JdTuple {
            central: &ds.jds[j],
            neighbors: &refs,
        };
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::eval().with_attention();
        let enc = recall.model.encoder.encode_tuple(&mut tape, &recall.store, &tuple, &mut ctx)?;
        let heads = ctx.attention.unwrap_or_default();
        let attention = cls_item_attention(&enc.layout, &heads)
            .into_iter()
            .filter(|a| a.jd == 0)
            .collect();
        jobs.push(RecommendedJob {
            recall_score: recall_scores[&jd_id],
            jd_id,
            click_score,
            attention,
        });
    }
    Ok(Recommendation {
        user_id: user_id.to_string(),
        jobs,
    })
}
