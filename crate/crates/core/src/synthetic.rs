//! Interaction logs with a planted spurious tag.
//!
//! Every item has a latent attribute vector and one categorical tag. A user's
//! next item is drawn from a softmax over
//! `(1 - rho) * a_pref * <u, v_i> + rho * a_tag * share(tag_i)`, where
//! `share` is the fraction of the user's history carrying the item's tag.
//! The tag term is unrelated to preference, so a model that leans on it
//! generalizes badly once it is removed. With `flip_at_test`, the held-out
//! last item is drawn from preference alone. Items are never repeated.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{build_splits, DataError, DatasetSplits, Interaction};
use crate::harness::metrics::{hr_at_k, rank_of_target};
use crate::model::Scores;
use crate::numerics::RngStream;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("history_length = {0} gives fewer than 3 interactions per user")]
    TooShort(usize),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub d_true: usize,
    pub n_tags: usize,
    pub history_length: usize,
    /// Weight `rho` of the tag affinity in the training period.
    pub spurious_strength: f64,
    pub flip_at_test: bool,
    pub seed: u64,
    pub preference_scale: f64,
    pub tag_scale: f64,
    pub n_max: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_users: 2000,
            n_items: 500,
            d_true: 8,
            n_tags: 16,
            history_length: 10,
            spurious_strength: 0.8,
            flip_at_test: true,
            seed: 0,
            preference_scale: 10.0,
            tag_scale: 4.0,
            n_max: 20,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.spurious_strength) {
            return bad("spurious_strength must lie in [0, 1]");
        }
        if self.n_users == 0
            || self.n_items == 0
            || self.d_true == 0
            || self.n_tags == 0
            || self.n_max == 0
        {
            return bad("all counts must be at least 1");
        }
        if self.history_length < 3 {
            return Err(SynthError::TooShort(self.history_length));
        }
        if self.history_length > self.n_items {
            return bad("history_length exceeds n_items and items are never repeated");
        }
        if !(self.preference_scale.is_finite() && self.tag_scale.is_finite()) {
            return bad("affinity scales must be finite");
        }
        Ok(())
    }
}

/// Generator state, indexed by catalog ids (`item_tags[i - 1]` is the tag of item `i`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthGroundTruth {
    pub config: SynthConfig,
    pub user_preferences: Vec<Vec<f64>>,
    pub item_attributes: Vec<Vec<f64>>,
    pub item_tags: Vec<usize>,
}

impl SynthGroundTruth {
    pub fn tag(&self, item: usize) -> usize {
        self.item_tags[item - 1]
    }
}

fn item_name(i: usize) -> String {
    format!("i{i:06}")
}

fn user_name(u: usize) -> String {
    format!("u{u:06}")
}

pub fn generate(config: &SynthConfig) -> Result<(DatasetSplits, SynthGroundTruth), SynthError> {
    config.validate()?;
    let root = RngStream::new(config.seed);
    let mut world = root.derive("world");
    let n = config.n_items;
    let attributes: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let v = world.normals(config.d_true);
            let norm = v
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt()
                .max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    let tags: Vec<usize> = (0..n).map(|_| world.below(0, config.n_tags)).collect();

    let rho = config.spurious_strength;
    let len = config.history_length;
    let mut preferences = Vec::with_capacity(config.n_users);
    let mut log = Vec::with_capacity(config.n_users * len);
    for u in 0..config.n_users {
        let mut rng = root.derive_index("user", u as u64);
        let pref_vec = rng.normals(config.d_true);
        let pref: Vec<f64> = attributes
            .iter()
            .map(|v| {
                config.preference_scale * v.iter().zip(&pref_vec).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        let mut used = vec![false; n];
        let mut tag_counts = vec![0usize; config.n_tags];
        for k in 0..len {
            let pure = k == 0 || (config.flip_at_test && k == len - 1);
            let logits: Vec<f64> = (0..n)
                .map(|i| {
                    if used[i] {
                        f64::NEG_INFINITY
                    } else if pure {
                        pref[i]
                    } else {
                        let share = tag_counts[tags[i]] as f64 / k as f64;
                        (1.0 - rho) * pref[i] + rho * config.tag_scale * share
                    }
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let i = rng.categorical(&weights).expect("at least one unused item");
            used[i] = true;
            tag_counts[tags[i]] += 1;
            log.push(Interaction::new(user_name(u), item_name(i), k as i64));
        }
        preferences.push(pref_vec);
    }

    let splits = build_splits(&log, config.n_max)?;
    // Items nobody consumed are absent from the catalog; reorder to catalog ids.
    let index_of = |raw: &str| raw[1..].parse::<usize>().expect("generated item name");
    let item_attributes = splits
        .catalog
        .items
        .iter()
        .map(|raw| attributes[index_of(raw)].clone())
        .collect();
    let item_tags = splits
        .catalog
        .items
        .iter()
        .map(|raw| tags[index_of(raw)])
        .collect();
    let truth = SynthGroundTruth {
        config: config.clone(),
        user_preferences: preferences,
        item_attributes,
        item_tags,
    };
    Ok((splits, truth))
}

/// Scores every item by the share of `history` carrying its tag, plus a tiny
/// random jitter so ties are broken uniformly.
pub fn tag_oracle_scores(
    history: &[usize],
    truth: &SynthGroundTruth,
    rng: &mut RngStream,
) -> Scores {
    let mut counts = vec![0usize; truth.config.n_tags];
    for &i in history {
        counts[truth.tag(i)] += 1;
    }
    let denom = history.len().max(1) as f64;
    let mut s = Vec::with_capacity(truth.item_tags.len() + 1);
    s.push(f64::NEG_INFINITY);
    for &t in &truth.item_tags {
        s.push(counts[t] as f64 / denom + 1e-6 * rng.uniform());
    }
    Scores(s)
}

/// HR@k of the tag oracle over a set of examples.
pub fn tag_oracle_hit_rate(
    examples: &[crate::data::SequenceExample],
    truth: &SynthGroundTruth,
    k: usize,
    rng: &mut RngStream,
) -> f64 {
    let hits: f64 = examples
        .iter()
        .map(|ex| {
            hr_at_k(
                rank_of_target(&tag_oracle_scores(ex.history(), truth, rng), ex.target),
                k,
            )
        })
        .sum();
    hits / examples.len().max(1) as f64
}
