use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::data::PADDING;
use crate::model::Scores;

pub const CUTOFFS: [usize; 3] = [5, 10, 20];

/// 1-based rank of `target` over the full catalog. Items tied with the target
/// count as ranked above it; padding never competes.
pub fn rank_of_target(scores: &Scores, target: usize) -> usize {
    rank_excluding(scores, target, None)
}

/// Like [`rank_of_target`] but items in `history` (other than the target) are
/// removed from the candidate list.
pub fn rank_of_target_masked(scores: &Scores, target: usize, history: &HashSet<usize>) -> usize {
    rank_excluding(scores, target, Some(history))
}

fn rank_excluding(scores: &Scores, target: usize, skip: Option<&HashSet<usize>>) -> usize {
    let s = scores.values();
    let t = s[target];
    1 + s
        .iter()
        .enumerate()
        .filter(|&(i, &v)| {
            i != PADDING && i != target && v >= t && !skip.is_some_and(|h| h.contains(&i))
        })
        .count()
}

pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// Mean HR@k and NDCG@k for each cutoff.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
}

impl Metrics {
    pub fn from_ranks(ranks: &[usize], cutoffs: &[usize]) -> Metrics {
        let n = ranks.len().max(1) as f64;
        let mut m = Metrics::default();
        for &k in cutoffs {
            m.hr.insert(k, ranks.iter().map(|&r| hr_at_k(r, k)).sum::<f64>() / n);
            m.ndcg
                .insert(k, ranks.iter().map(|&r| ndcg_at_k(r, k)).sum::<f64>() / n);
        }
        m
    }

    /// Bounds in `[0, 1]` and non-decreasing in the cutoff.
    pub fn is_consistent(&self) -> bool {
        let ok = |m: &BTreeMap<usize, f64>| {
            m.values().all(|v| (0.0..=1.0).contains(v))
                && m.values().zip(m.values().skip(1)).all(|(a, b)| a <= b)
        };
        ok(&self.hr) && ok(&self.ndcg)
    }
}
