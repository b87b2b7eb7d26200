//! On-disk dataset layout and validation.
//!
//! A dataset directory holds three line-delimited JSON files:
//!
//! * `jds.jsonl`: one [`JobDescription`] per line
//! * `users.jsonl`: one [`UserEntry`] per line (a [`UserProfile`] plus the
//!   id of the job it is paired with, if any)
//! * `clicks.jsonl`: one [`ClickRecord`] per line (may be empty)
//!
//! and a `vocab.txt` word vocabulary.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::io::{read_jsonl, write_jsonl};
use crate::types::{ClickRecord, JobDescription, PersonJobRecord, UserProfile};
use crate::vocab::Vocab;

pub const JDS_FILE: &str = "jds.jsonl";
pub const USERS_FILE: &str = "users.jsonl";
pub const CLICKS_FILE: &str = "clicks.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserEntry {
    #[serde(flatten)]
    pub profile: UserProfile,
    /// Job this person holds; users without one only appear in clicks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jd_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub jds: Vec<JobDescription>,
    pub users: Vec<UserEntry>,
    pub clicks: Vec<ClickRecord>,
    pub vocab: Vocab,
}

/// Index of a person-job pair: positions in `jds` and `users`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct PairIdx {
    pub jd: usize,
    pub user: usize,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let jds = read_jsonl(&dir.join(JDS_FILE))?;
        let users = read_jsonl(&dir.join(USERS_FILE))?;
        let clicks_path = dir.join(CLICKS_FILE);
        let clicks = if clicks_path.exists() {
            read_jsonl(&clicks_path)?
        } else {
            Vec::new()
        };
        let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
        Ok(Self {
            jds,
            users,
            clicks,
            vocab,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_jsonl(&dir.join(JDS_FILE), &self.jds)?;
        write_jsonl(&dir.join(USERS_FILE), &self.users)?;
        write_jsonl(&dir.join(CLICKS_FILE), &self.clicks)?;
        self.vocab.save(&dir.join(VOCAB_FILE))
    }

    pub fn num_skills(&self) -> usize {
        self.users.first().map_or(0, |u| u.profile.skills.len())
    }

    /// One past the largest position-name id.
    pub fn num_positions(&self) -> usize {
        self.users
            .iter()
            .map(|u| u.profile.aux_info.position_name_id + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn max_level(&self) -> usize {
        self.users
            .iter()
            .map(|u| u.profile.aux_info.position_level)
            .max()
            .unwrap_or(0)
    }

    pub fn jd_index(&self) -> BTreeMap<&str, usize> {
        self.jds
            .iter()
            .enumerate()
            .map(|(i, j)| (j.jd_id.as_str(), i))
            .collect()
    }

    pub fn user_index(&self) -> BTreeMap<&str, usize> {
        self.users
            .iter()
            .enumerate()
            .map(|(i, u)| (u.profile.user_id.as_str(), i))
            .collect()
    }

    /// Person-job pairs in user order. Users naming an unknown job are
    /// skipped here and reported by [`validate_dataset`].
    pub fn pairs(&self) -> Vec<PairIdx> {
        let jd_index = self.jd_index();
        self.users
            .iter()
            .enumerate()
            .filter_map(|(u, e)| {
                e.jd_id
                    .as_deref()
                    .and_then(|j| jd_index.get(j))
                    .map(|&jd| PairIdx { jd, user: u })
            })
            .collect()
    }

    pub fn record(&self, pair: PairIdx) -> PersonJobRecord<'_> {
        PersonJobRecord {
            jd: &self.jds[pair.jd],
            profile: &self.users[pair.user].profile,
        }
    }
}

/// Deterministic train / held-out partition of the person-job pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<PairIdx>,
    pub test: Vec<PairIdx>,
}

impl Split {
    /// Shuffles pairs with `seed` and holds out `test_fraction` of them
    /// (at least one when there are two or more pairs).
    pub fn new(pairs: &[PairIdx], test_fraction: f64, seed: u64) -> Self {
        let mut order: Vec<PairIdx> = pairs.to_vec();
        order.sort();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut n_test = (order.len() as f64 * test_fraction).round() as usize;
        if test_fraction > 0.0 && n_test == 0 && order.len() >= 2 {
            n_test = 1;
        }
        n_test = n_test.min(order.len().saturating_sub(1));
        let test = order.split_off(order.len() - n_test);
        let mut train = order;
        train.sort();
        let mut test = test;
        test.sort();
        Self { train, test }
    }

    pub fn train_jds(&self) -> BTreeSet<usize> {
        self.train.iter().map(|p| p.jd).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// `jd:<id>`, `user:<id>` or `click:<line>`.
    pub record: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, record: String, message: impl Into<String>) {
        self.violations.push(Violation {
            record,
            message: message.into(),
        });
    }
}

/// Lists every broken invariant. Clicks are optional.
pub fn validate_dataset(ds: &Dataset) -> ValidationReport {
    let mut report = ValidationReport::default();
    let vocab_size = ds.vocab.len();
    let mut jd_ids = BTreeSet::new();
    for jd in &ds.jds {
        let rec = format!("jd:{}", jd.jd_id);
        if !jd_ids.insert(jd.jd_id.as_str()) {
            report.push(rec.clone(), "duplicate jd_id");
        }
        if jd.items.is_empty() {
            report.push(rec.clone(), "no items");
        }
        for (m, item) in jd.items.iter().enumerate() {
            if item.token_ids.is_empty() {
                report.push(rec.clone(), format!("item {m} has no tokens"));
            }
            if let Some(t) = item.token_ids.iter().find(|&&t| t >= vocab_size) {
                report.push(
                    rec.clone(),
                    format!("item {m} token id {t} outside vocabulary of {vocab_size}"),
                );
            }
        }
    }

    let c = ds.num_skills();
    let mut user_ids = BTreeSet::new();
    for u in &ds.users {
        let rec = format!("user:{}", u.profile.user_id);
        if !user_ids.insert(u.profile.user_id.as_str()) {
            report.push(rec.clone(), "duplicate user_id");
        }
        if let Some(msg) = u.profile.skills.violation() {
            report.push(rec.clone(), format!("skill distribution: {msg}"));
        }
        if u.profile.skills.len() != c {
            report.push(
                rec.clone(),
                format!(
                    "skill distribution has {} entries, expected {c}",
                    u.profile.skills.len()
                ),
            );
        }
        if let Some(j) = &u.jd_id {
            if !jd_ids.contains(j.as_str()) {
                report.push(rec.clone(), format!("paired with unknown jd_id {j}"));
            }
        }
    }

    for (i, click) in ds.clicks.iter().enumerate() {
        let rec = format!("click:{}", i + 1);
        if click.label > 1 {
            report.push(rec.clone(), format!("label {} not in {{0, 1}}", click.label));
        }
        if !jd_ids.contains(click.jd_id.as_str()) {
            report.push(rec.clone(), format!("unknown jd_id {}", click.jd_id));
        }
        if !user_ids.contains(click.user_id.as_str()) {
            report.push(rec, format!("unknown user_id {}", click.user_id));
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::types::{AuxUserInfo, SkillDistribution, TokenizedItem};

    fn tiny() -> Dataset {
        let vocab = Vocab::build(["build models", "test code"]);
        let jd = |id: &str| JobDescription {
            jd_id: id.into(),
            title_id: 0,
            items: vec![TokenizedItem {
                token_ids: vocab.encode("build models"),
            }],
            raw_items: vec!["build models".into()],
        };
        let user = |id: &str, jd: &str, probs: Vec<f64>| UserEntry {
            profile: UserProfile {
                user_id: id.into(),
                skills: SkillDistribution { probs },
                aux_info: AuxUserInfo {
                    position_name_id: 0,
                    position_level: 1,
                },
            },
            jd_id: Some(jd.into()),
        };
        Dataset {
            jds: vec![jd("j1"), jd("j2")],
            users: vec![
                user("u1", "j1", vec![0.5, 0.5]),
                user("u2", "j2", vec![0.25, 0.75]),
            ],
            clicks: vec![],
            vocab,
        }
    }

    #[test]
    fn valid_records_without_clicks_pass() {
        assert!(validate_dataset(&tiny()).is_empty());
    }

    #[test]
    fn flags_unnormalised_distribution() {
        let mut ds = tiny();
        ds.users[1].profile.skills.probs = vec![0.4, 0.5];
        let r = validate_dataset(&ds);
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].record, "user:u2");
        assert!(r.violations[0].message.contains("sum"));
    }

    #[test]
    fn flags_dangling_click() {
        let mut ds = tiny();
        ds.clicks.push(ClickRecord {
            user_id: "u1".into(),
            jd_id: "nope".into(),
            label: 1,
        });
        let r = validate_dataset(&ds);
        assert_eq!(r.violations.len(), 1);
        assert!(r.violations[0].message.contains("unknown jd_id nope"));
    }

    #[test]
    fn parse_error_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny();
        ds.save(dir.path()).unwrap();
        let p = dir.path().join(CLICKS_FILE);
        std::fs::write(&p, "{\"user_id\":\"u1\",\"jd_id\":\"j1\",\"label\":1}\nnot json\n").unwrap();
        match Dataset::load(dir.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let pairs: Vec<PairIdx> = (0..50).map(|i| PairIdx { jd: i, user: i }).collect();
        let a = Split::new(&pairs, 0.2, 9);
        let b = Split::new(&pairs, 0.2, 9);
        assert_eq!(a, b);
        assert_eq!(a.test.len(), 10);
        assert!(a.test.iter().all(|p| !a.train.contains(p)));
    }
}
