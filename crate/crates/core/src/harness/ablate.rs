use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::eval::evaluate_examples;
use super::metrics::{Metrics, CUTOFFS};
use super::{train, HarnessError, TrainConfig};
use crate::data::DatasetSplits;
use crate::objective::{ObjectiveKind, TermMask};

/// Row labels and the loss term each one drops.
pub const ABLATION_ROWS: [(&str, Option<char>); 4] = [
    ("raw", None),
    ("w/o (1)", Some('a')),
    ("w/o (2)", Some('b')),
    ("w/o (3)", Some('c')),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub mask: TermMask,
    /// Test metrics averaged over seeds.
    pub metrics: Metrics,
    pub per_seed: Vec<Metrics>,
}

impl AblationRow {
    pub fn hr20(&self) -> f64 {
        self.metrics.hr[&20]
    }

    pub fn ndcg20(&self) -> f64 {
        self.metrics.ndcg[&20]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub dataset: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub config: serde_json::Value,
}

impl AblationTable {
    /// Aligned columns: label, HR@20, NDCG@20.
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<10}{:>12}{:>12}\n", self.dataset, "HR@20", "NDCG@20");
        for r in &self.rows {
            let _ = writeln!(s, "{:<10}{:>12.4}{:>12.4}", r.label, r.hr20(), r.ndcg20());
        }
        s
    }
}

fn mean_metrics(runs: &[Metrics]) -> Metrics {
    let n = runs.len().max(1) as f64;
    let mut m = Metrics::default();
    for &k in &CUTOFFS {
        m.hr.insert(k, runs.iter().map(|r| r.hr[&k]).sum::<f64>() / n);
        m.ndcg
            .insert(k, runs.iter().map(|r| r.ndcg[&k]).sum::<f64>() / n);
    }
    m
}

/// Trains the full objective and three variants that each drop one ranking
/// term, on the same seeds, and reports test metrics.
pub fn ablate(
    splits: &DatasetSplits,
    base: &TrainConfig,
    seeds: &[u64],
    dataset: &str,
) -> Result<AblationTable, HarnessError> {
    if seeds.is_empty() {
        return Err(HarnessError::Config(
            "ablation needs at least one seed".into(),
        ));
    }
    let mut rows = Vec::new();
    for (label, drop) in ABLATION_ROWS {
        let mut cfg = base.clone();
        cfg.objective.kind = ObjectiveKind::Invariant;
        let mask = drop.map_or(base.objective.mask, |t| base.objective.mask.without(t));
        cfg.objective.mask = mask;
        let mut per_seed = Vec::new();
        for &seed in seeds {
            cfg.seed = seed;
            let out = train(splits, &cfg)?;
            per_seed.push(evaluate_examples(&out.network, &splits.test, &CUTOFFS)?);
        }
        rows.push(AblationRow {
            label: label.to_string(),
            mask,
            metrics: mean_metrics(&per_seed),
            per_seed,
        });
    }
    Ok(AblationTable {
        dataset: dataset.to_string(),
        seeds: seeds.to_vec(),
        rows,
        config: base.echo(),
    })
}
