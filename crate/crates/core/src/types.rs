//! Shared domain types.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::Vocab;

/// Default cap on items per job description; extra items are dropped.
pub const DEFAULT_MAX_ITEMS: usize = 40;

/// Tolerance on the total mass of a skill distribution.
pub const DISTRIBUTION_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedItem {
    pub token_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobDescription {
    pub jd_id: String,
    pub title_id: usize,
    pub items: Vec<TokenizedItem>,
    pub raw_items: Vec<String>,
}

impl JobDescription {
    /// Tokenises `raw_items`, dropping items with no tokens and keeping the
    /// first `max_items` of what remains.
    pub fn from_raw(
        jd_id: impl Into<String>,
        title_id: usize,
        raw_items: &[String],
        vocab: &Vocab,
        max_items: usize,
    ) -> Result<Self> {
        let jd_id = jd_id.into();
        let mut items = Vec::new();
        let mut kept_raw = Vec::new();
        for raw in raw_items {
            if items.len() == max_items {
                break;
            }
            let ids = vocab.encode(raw);
            if ids.is_empty() {
                continue;
            }
            items.push(TokenizedItem { token_ids: ids });
            kept_raw.push(raw.clone());
        }
        if items.is_empty() {
            return Err(Error::Domain(format!("job {jd_id} has no non-empty items")));
        }
        Ok(Self {
            jd_id,
            title_id,
            items,
            raw_items: kept_raw,
        })
    }

    /// Items actually fed to the model.
    pub fn model_items(&self, max_items: usize) -> &[TokenizedItem] {
        &self.items[..self.items.len().min(max_items)]
    }
}

/// Probability vector over the skill vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillDistribution {
    pub probs: Vec<f64>,
}

impl SkillDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let d = Self { probs };
        match d.violation() {
            None => Ok(d),
            Some(msg) => Err(Error::Domain(msg)),
        }
    }

    pub fn uniform(c: usize) -> Self {
        Self {
            probs: vec![1.0 / c as f64; c],
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    /// Description of the first broken invariant, if any.
    pub fn violation(&self) -> Option<String> {
        if self.probs.is_empty() {
            return Some("empty distribution".into());
        }
        if let Some((i, p)) = self
            .probs
            .iter()
            .enumerate()
            .find(|(_, p)| !p.is_finite() || **p < 0.0 || **p > 1.0)
        {
            return Some(format!("entry {i} = {p} outside [0, 1]"));
        }
        let total: f64 = self.probs.iter().sum();
        if (total - 1.0).abs() > DISTRIBUTION_TOL {
            return Some(format!("entries sum to {total}, not 1"));
        }
        None
    }
}

/// Softmax of raw skill ratings.
pub fn normalize_ratings(ratings: &[f64]) -> Result<SkillDistribution> {
    if ratings.is_empty() {
        return Err(Error::Domain("empty rating vector".into()));
    }
    if let Some(i) = ratings.iter().position(|r| !r.is_finite()) {
        return Err(Error::Domain(format!("rating {i} is not finite")));
    }
    let max = ratings.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = ratings.iter().map(|r| (r - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(SkillDistribution {
        probs: exps.into_iter().map(|e| e / total).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxUserInfo {
    pub position_name_id: usize,
    pub position_level: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: String,
    pub skills: SkillDistribution,
    pub aux_info: AuxUserInfo,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickRecord {
    pub user_id: String,
    pub jd_id: String,
    pub label: u8,
}

/// A central job with its neighbours, borrowed from a dataset.
#[derive(Debug, Clone, Copy)]
pub struct JdTuple<'a> {
    pub central: &'a JobDescription,
    pub neighbors: &'a [&'a JobDescription],
}

impl JdTuple<'_> {
    /// Central first, then neighbours in order.
    pub fn members(&self) -> impl Iterator<Item = &JobDescription> {
        std::iter::once(self.central).chain(self.neighbors.iter().copied())
    }

    pub fn size(&self) -> usize {
        1 + self.neighbors.len()
    }

    /// Neighbour ids must be distinct from the centre and from each other.
    pub fn check_distinct(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for jd in self.members() {
            if !seen.insert(jd.jd_id.as_str()) {
                return Err(Error::Contract(format!(
                    "job {} appears twice in tuple centred on {}",
                    jd.jd_id, self.central.jd_id
                )));
            }
        }
        Ok(())
    }
}

/// One job paired with the profile of a person holding it.
#[derive(Debug, Clone, Copy)]
pub struct PersonJobRecord<'a> {
    pub jd: &'a JobDescription,
    pub profile: &'a UserProfile,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_equal_ratings_give_uniform() {
        let d = normalize_ratings(&[3.5; 5]).unwrap();
        for p in &d.probs {
            assert!((p - 0.2).abs() < 1e-15);
        }
        let z = normalize_ratings(&[0.0; 4]).unwrap();
        assert_eq!(z.probs, vec![0.25; 4]);
    }

    #[test]
    fn two_ratings_match_closed_form() {
        let d = normalize_ratings(&[1.0, 2.0]).unwrap();
        let e = std::f64::consts::E;
        assert!((d.probs[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((d.probs[1] - e / (1.0 + e)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_rating_is_domain_error() {
        assert!(matches!(
            normalize_ratings(&[1.0, f64::NAN]),
            Err(Error::Domain(_))
        ));
        assert!(normalize_ratings(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn distribution_violations() {
        assert!(SkillDistribution::new(vec![0.5, 0.4]).is_err());
        assert!(SkillDistribution::new(vec![1.2, -0.2]).is_err());
        assert!(SkillDistribution::new(vec![0.5, 0.5]).is_ok());
    }

    #[test]
    fn truncation_keeps_first_items() {
        let raws: Vec<String> = (0..50).map(|i| format!("item {i}")).collect();
        let vocab = Vocab::build(raws.iter().map(String::as_str));
        let jd = JobDescription::from_raw("j", 0, &raws, &vocab, 40).unwrap();
        assert_eq!(jd.items.len(), 40);
        assert_eq!(jd.raw_items[39], "item 39");
    }

    #[test]
    fn empty_items_are_dropped() {
        let raws = vec!["!!!".to_string(), "Design models".to_string()];
        let vocab = Vocab::build(raws.iter().map(String::as_str));
        let jd = JobDescription::from_raw("j", 0, &raws, &vocab, 40).unwrap();
        assert_eq!(jd.items.len(), 1);
        assert!(JobDescription::from_raw("k", 0, &raws[..1], &vocab, 40).is_err());
    }
}
