//! Synthetic person-job datasets with a known generative process, and a
//! loader for generic feature-vector / label-distribution files.
//!
//! Every job draws a latent skill distribution (its title's dominant skills
//! plus a few popularity-weighted extras). Items are skill phrases drawn in
//! proportion to the latent, so the text carries the distribution. A paired
//! user's profile is the latent with bounded symmetric noise. Clicks are
//! Bernoulli draws whose logit is the temperature-scaled cosine between job
//! latent and user profile, centred on the population mean.

use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::autograd::sigmoid;
use crate::dataset::{Dataset, UserEntry};
use crate::error::{Error, Result};
use crate::io::{read_lines, write_json};
use crate::tensor::cosine;
use crate::types::{AuxUserInfo, ClickRecord, JobDescription, SkillDistribution, UserProfile};
use crate::vocab::Vocab;

const VERBS: [&str; 12] = [
    "design", "build", "maintain", "develop", "optimize", "lead", "deploy", "test", "review",
    "improve", "support", "analyze",
];
const NOUNS: [&str; 8] = [
    "systems",
    "pipelines",
    "services",
    "models",
    "tools",
    "platforms",
    "solutions",
    "components",
];
const FILLERS: [&str; 10] = [
    "and",
    "with",
    "strong",
    "team",
    "experience",
    "plus",
    "the",
    "our",
    "daily",
    "new",
];
const TOPIC_WORDS_PER_SKILL: usize = 3;
/// Position levels run `0..=MAX_LEVEL`.
pub const MAX_LEVEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_skills: usize,
    pub num_titles: usize,
    pub num_jds: usize,
    pub num_users: usize,
    pub items_min: usize,
    pub items_max: usize,
    pub phrases_per_skill: usize,
    /// Half-width of the uniform perturbation applied to user profiles.
    pub neighbor_noise: f64,
    pub click_temperature: f64,
    /// Jobs shown to each user in the click log.
    pub impressions_per_user: usize,
    /// Zipf exponent for how often a skill appears as a secondary skill.
    pub popularity_skew: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_skills: 20,
            num_titles: 10,
            num_jds: 2000,
            num_users: 2000,
            items_min: 6,
            items_max: 12,
            phrases_per_skill: 6,
            neighbor_noise: 0.1,
            click_temperature: 12.0,
            impressions_per_user: 12,
            popularity_skew: 1.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_skills", self.num_skills),
            ("num_titles", self.num_titles),
            ("num_jds", self.num_jds),
            ("num_users", self.num_users),
            ("items_min", self.items_min),
            ("phrases_per_skill", self.phrases_per_skill),
            ("impressions_per_user", self.impressions_per_user),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("synth.{name} must be >= 1")));
            }
        }
        if self.items_max < self.items_min {
            return Err(Error::Config("synth.items_max < synth.items_min".into()));
        }
        if self.phrases_per_skill > 24 {
            return Err(Error::Config("synth.phrases_per_skill must be <= 24".into()));
        }
        if !(0.0..=1.0).contains(&self.neighbor_noise) {
            return Err(Error::Config("synth.neighbor_noise must be in [0, 1]".into()));
        }
        if !(self.click_temperature > 0.0 && self.click_temperature.is_finite()) {
            return Err(Error::Config("synth.click_temperature must be > 0".into()));
        }
        if !(self.popularity_skew >= 0.0) {
            return Err(Error::Config("synth.popularity_skew must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JdTruth {
    pub jd_id: String,
    pub title_id: usize,
    pub latent: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerativeTruth {
    pub jds: Vec<JdTruth>,
    /// Mean job/user cosine over all impressions (the click logit centre).
    pub click_mean_cosine: f64,
}

impl GenerativeTruth {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Skills owned by a title. Titles own disjoint skill sets when there are
/// at least as many skills as titles.
pub fn title_skills(title: usize, num_titles: usize, num_skills: usize) -> Vec<usize> {
    if num_skills >= num_titles {
        (0..num_skills).filter(|c| c % num_titles == title).collect()
    } else {
        vec![title % num_skills]
    }
}

fn topic_word(skill: usize, k: usize) -> String {
    format!("t{skill}{}", (b'a' + k as u8) as char)
}

/// Phrase `p` of `skill`: verb, topic word, noun.
pub fn skill_phrase(skill: usize, p: usize) -> String {
    let verb = VERBS[(skill + p) % VERBS.len()];
    let topic = topic_word(skill, p % TOPIC_WORDS_PER_SKILL);
    let noun = NOUNS[(p + 2 * skill) % NOUNS.len()];
    let mut s = String::with_capacity(32);
    s.push_str(&verb[..1].to_uppercase());
    s.push_str(&verb[1..]);
    s.push(' ');
    s.push_str(&topic);
    s.push(' ');
    s.push_str(noun);
    s
}

fn stream(seed: u64, domain: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index as u64);
    rng
}

const JD_STREAM: u64 = 1;
const USER_STREAM: u64 = 2;
const CLICK_STREAM: u64 = 3;

fn normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    for x in v.iter_mut() {
        *x /= s;
    }
}

fn sample_latent(cfg: &SynthConfig, title: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let c = cfg.num_skills;
    let gamma = Gamma::new(2.0, 1.0).expect("valid gamma");
    let mut w = vec![0.0; c];
    let dominant = title_skills(title, cfg.num_titles, c);
    for &s in &dominant {
        w[s] += 2.0 * gamma.sample(rng);
    }
    let others: Vec<usize> = (0..c).filter(|s| !dominant.contains(s)).collect();
    if !others.is_empty() {
        let weights: Vec<f64> = others
            .iter()
            .map(|&s| 1.0 / ((s + 1) as f64).powf(cfg.popularity_skew))
            .collect();
        let pick = WeightedIndex::new(&weights).expect("positive weights");
        let n_extra = rng.random_range(1..=2).min(others.len());
        for _ in 0..n_extra {
            w[others[pick.sample(rng)]] += gamma.sample(rng);
        }
    }
    normalize(&mut w);
    w
}

/// `latent + U(-noise, noise)` per entry, clipped at zero and renormalised.
/// Zero noise returns the latent unchanged.
pub fn perturb(latent: &[f64], noise: f64, rng: &mut impl Rng) -> Vec<f64> {
    if noise == 0.0 {
        return latent.to_vec();
    }
    let mut v: Vec<f64> = latent
        .iter()
        .map(|&p| (p + rng.random_range(-noise..=noise)).max(0.0))
        .collect();
    if v.iter().sum::<f64>() <= 0.0 {
        return latent.to_vec();
    }
    normalize(&mut v);
    v
}

fn normalized_entropy(p: &[f64]) -> f64 {
    if p.len() < 2 {
        return 0.0;
    }
    let h: f64 = p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum();
    h / (p.len() as f64).ln()
}

/// Seniority falls with the entropy of the latent, with occasional jitter.
fn position_level(latent: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let base = (MAX_LEVEL as f64 * (1.0 - normalized_entropy(latent))).round() as i64;
    let jitter = if rng.random_bool(0.25) {
        if rng.random_bool(0.5) {
            1
        } else {
            -1
        }
    } else {
        0
    };
    (base + jitter).clamp(0, MAX_LEVEL as i64) as usize
}

pub fn jd_id(i: usize) -> String {
    format!("j{i:05}")
}

pub fn user_id(i: usize) -> String {
    format!("u{i:05}")
}

/// Generates a dataset. Deterministic given `cfg.seed`; every job, user
/// and click list draws from its own indexed random stream.
pub fn generate(cfg: &SynthConfig) -> Result<(Dataset, GenerativeTruth)> {
    cfg.validate()?;
    let c = cfg.num_skills;

    let mut titles = Vec::with_capacity(cfg.num_jds);
    let mut latents = Vec::with_capacity(cfg.num_jds);
    let mut raw_items: Vec<Vec<String>> = Vec::with_capacity(cfg.num_jds);
    for i in 0..cfg.num_jds {
        let mut rng = stream(cfg.seed, JD_STREAM, i);
        let title = rng.random_range(0..cfg.num_titles);
        let latent = sample_latent(cfg, title, &mut rng);
        let n_items = rng.random_range(cfg.items_min..=cfg.items_max);
        let skill_pick = WeightedIndex::new(&latent).expect("latent has mass");
        let items = (0..n_items)
            .map(|_| {
                let skill = skill_pick.sample(&mut rng);
                let mut text = skill_phrase(skill, rng.random_range(0..cfg.phrases_per_skill));
                for _ in 0..rng.random_range(0..=2) {
                    text.push(' ');
                    text.push_str(FILLERS[rng.random_range(0..FILLERS.len())]);
                }
                text
            })
            .collect();
        titles.push(title);
        latents.push(latent);
        raw_items.push(items);
    }

    let vocab = Vocab::build(raw_items.iter().flatten().map(String::as_str));
    let jds = raw_items
        .iter()
        .enumerate()
        .map(|(i, items)| JobDescription::from_raw(jd_id(i), titles[i], items, &vocab, cfg.items_max))
        .collect::<Result<Vec<_>>>()?;

    let mut users = Vec::with_capacity(cfg.num_users);
    for u in 0..cfg.num_users {
        let base = u % cfg.num_jds;
        let mut rng = stream(cfg.seed, USER_STREAM, u);
        let probs = perturb(&latents[base], cfg.neighbor_noise, &mut rng);
        let level = position_level(&latents[base], &mut rng);
        users.push(UserEntry {
            profile: UserProfile {
                user_id: user_id(u),
                skills: SkillDistribution { probs },
                aux_info: AuxUserInfo {
                    position_name_id: titles[base],
                    position_level: level,
                },
            },
            jd_id: (u < cfg.num_jds).then(|| jd_id(u)),
        });
    }

    // Impressions: the user's own job plus random others.
    let n_imp = cfg.impressions_per_user.min(cfg.num_jds);
    let mut impressions: Vec<Vec<(usize, f64)>> = Vec::with_capacity(cfg.num_users);
    for (u, user) in users.iter().enumerate() {
        let base = u % cfg.num_jds;
        let mut rng = stream(cfg.seed, CLICK_STREAM, u);
        let mut shown = vec![base];
        if n_imp > 1 {
            let others = sample(&mut rng, cfg.num_jds - 1, n_imp - 1);
            shown.extend(others.iter().map(|k| if k >= base { k + 1 } else { k }));
        }
        impressions.push(
            shown
                .into_iter()
                .map(|j| (j, cosine(&latents[j], &user.profile.skills.probs)))
                .collect(),
        );
    }
    let total: usize = impressions.iter().map(Vec::len).sum();
    let mean_cos = impressions.iter().flatten().map(|(_, s)| s).sum::<f64>() / total as f64;
    let mut clicks = Vec::with_capacity(total);
    for (u, shown) in impressions.iter().enumerate() {
        // Offset stream so label draws are independent of impression draws.
        let mut rng = stream(cfg.seed, CLICK_STREAM, cfg.num_users + u);
        for &(j, cos) in shown {
            let p = sigmoid(cfg.click_temperature * (cos - mean_cos));
            clicks.push(ClickRecord {
                user_id: user_id(u),
                jd_id: jd_id(j),
                label: u8::from(rng.random_bool(p)),
            });
        }
    }

    let truth = GenerativeTruth {
        jds: (0..cfg.num_jds)
            .map(|i| JdTruth {
                jd_id: jd_id(i),
                title_id: titles[i],
                latent: latents[i].clone(),
            })
            .collect(),
        click_mean_cosine: mean_cos,
    };
    debug_assert_eq!(c, users[0].profile.skills.len());
    Ok((
        Dataset {
            jds,
            users,
            clicks,
            vocab,
        },
        truth,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorLdlRecord {
    pub features: Vec<f64>,
    pub distribution: SkillDistribution,
}

fn parse_numbers(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| format!("bad number {t:?}")))
        .collect()
}

/// Loads `features ; distribution` rows (numbers separated by commas or
/// whitespace). All rows must share the same feature and label widths.
pub fn load_vector_ldl(path: &Path) -> Result<Vec<VectorLdlRecord>> {
    let mut out: Vec<VectorLdlRecord> = Vec::new();
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    for (line, text) in read_lines(path)? {
        let (f, d) = text
            .split_once(';')
            .ok_or_else(|| parse_err(line, "expected `features ; distribution`".into()))?;
        let features = parse_numbers(f).map_err(|m| parse_err(line, m))?;
        let probs = parse_numbers(d).map_err(|m| parse_err(line, m))?;
        if let Some(first) = out.first() {
            if features.len() != first.features.len() {
                return Err(parse_err(
                    line,
                    format!(
                        "row has {} features, expected {}",
                        features.len(),
                        first.features.len()
                    ),
                ));
            }
            if probs.len() != first.distribution.len() {
                return Err(parse_err(
                    line,
                    format!(
                        "row has {} labels, expected {}",
                        probs.len(),
                        first.distribution.len()
                    ),
                ));
            }
        }
        let distribution = SkillDistribution { probs };
        if let Some(msg) = distribution.violation() {
            return Err(parse_err(line, format!("label distribution: {msg}")));
        }
        out.push(VectorLdlRecord {
            features,
            distribution,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::validate_dataset;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            num_skills: 6,
            num_titles: 3,
            num_jds: 40,
            num_users: 45,
            impressions_per_user: 5,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_gives_identical_files() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        generate(&small(3)).unwrap().0.save(dir_a.path()).unwrap();
        generate(&small(3)).unwrap().0.save(dir_b.path()).unwrap();
        for f in ["jds.jsonl", "users.jsonl", "clicks.jsonl", "vocab.txt"] {
            let a = std::fs::read(dir_a.path().join(f)).unwrap();
            let b = std::fs::read(dir_b.path().join(f)).unwrap();
            assert_eq!(a, b, "{f} differs");
        }
    }

    #[test]
    fn zero_noise_profile_equals_latent() {
        let cfg = SynthConfig {
            neighbor_noise: 0.0,
            ..small(5)
        };
        let (ds, truth) = generate(&cfg).unwrap();
        for (u, user) in ds.users.iter().enumerate().take(cfg.num_jds) {
            assert_eq!(user.profile.skills.probs, truth.jds[u].latent);
        }
    }

    #[test]
    fn generated_dataset_validates() {
        let (ds, _) = generate(&small(11)).unwrap();
        let report = validate_dataset(&ds);
        assert!(report.is_empty(), "{report:?}");
        assert_eq!(ds.pairs().len(), 40);
        assert_eq!(ds.clicks.len(), 45 * 5);
    }

    #[test]
    fn lower_noise_keeps_profiles_closer() {
        let mean_cos = |noise: f64| {
            let cfg = SynthConfig {
                num_skills: 3,
                num_titles: 3,
                num_jds: 100,
                num_users: 100,
                neighbor_noise: noise,
                ..small(17)
            };
            let (ds, truth) = generate(&cfg).unwrap();
            ds.users
                .iter()
                .zip(&truth.jds)
                .map(|(u, t)| cosine(&u.profile.skills.probs, &t.latent))
                .sum::<f64>()
                / 100.0
        };
        let low = mean_cos(0.1);
        let high = mean_cos(0.5);
        assert!(low > high, "noise 0.1 -> {low}, noise 0.5 -> {high}");
    }

    #[test]
    fn titles_own_disjoint_skills() {
        let a = title_skills(0, 4, 10);
        let b = title_skills(1, 4, 10);
        assert_eq!(a, vec![0, 4, 8]);
        assert!(a.iter().all(|s| !b.contains(s)));
    }

    #[test]
    fn phrases_per_skill_are_distinct() {
        for skill in 0..20 {
            let mut seen = std::collections::BTreeSet::new();
            for p in 0..24 {
                assert!(seen.insert(skill_phrase(skill, p)));
            }
        }
    }

    #[test]
    fn vector_ldl_loader() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ldl.txt");
        std::fs::write(&p, "1.0, 2.0, 3.0 ; 0.5 0.5\n0 0 1;0.1,0.9\n").unwrap();
        let recs = load_vector_ldl(&p).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].features, vec![0.0, 0.0, 1.0]);
        std::fs::write(&p, "1 2 3 ; 0.5 0.5\n1 2 ; 0.5 0.5\n").unwrap();
        match load_vector_ldl(&p) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("features"));
            }
            other => panic!("{other:?}"),
        }
        std::fs::write(&p, "1 2 ; 0.5 0.4\n").unwrap();
        assert!(load_vector_ldl(&p).is_err());
    }
}
