use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{rank_of_target, Metrics, CUTOFFS};
use super::{Checkpoint, HarnessError};
use crate::data::{DatasetSplits, SequenceExample};
use crate::objective::Network;

const EVAL_BATCH: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Validation,
    Test,
}

impl std::str::FromStr for Split {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "validation" | "valid" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(HarnessError::Config(format!(
                "unknown split '{other}' (validation, test)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    #[serde(flatten)]
    pub metrics: Metrics,
    pub n_users: usize,
    pub seed: u64,
    pub config: serde_json::Value,
}

impl EvalReport {
    /// Columns HR@5/10/20 then NDCG@5/10/20.
    pub fn to_text(&self) -> String {
        let mut s = header_line();
        s.push_str(&metric_line(
            &format!("{:?}", self.split).to_lowercase(),
            &self.metrics,
        ));
        s
    }
}

fn header_line() -> String {
    let mut s = format!("{:<12}", "");
    for k in CUTOFFS {
        s.push_str(&format!("{:>10}", format!("HR@{k}")));
    }
    for k in CUTOFFS {
        s.push_str(&format!("{:>10}", format!("NDCG@{k}")));
    }
    s.push('\n');
    s
}

fn metric_line(label: &str, m: &Metrics) -> String {
    let mut s = format!("{label:<12}");
    for k in CUTOFFS {
        let _ = write!(s, "{:>10.4}", m.hr.get(&k).copied().unwrap_or(f64::NAN));
    }
    for k in CUTOFFS {
        let _ = write!(s, "{:>10.4}", m.ndcg.get(&k).copied().unwrap_or(f64::NAN));
    }
    s.push('\n');
    s
}

/// Base model, framework, and the relative improvement in percent.
pub fn comparison_table(base: &Metrics, framework: &Metrics) -> String {
    let mut s = header_line();
    s.push_str(&metric_line("base", base));
    s.push_str(&metric_line("framework", framework));
    let mut imp = format!("{:<12}", "improv.");
    let pct = |a: f64, b: f64| {
        if a > 0.0 {
            format!("{:.2}%", 100.0 * (b - a) / a)
        } else {
            "-".to_string()
        }
    };
    for k in CUTOFFS {
        let _ = write!(imp, "{:>10}", pct(base.hr[&k], framework.hr[&k]));
    }
    for k in CUTOFFS {
        let _ = write!(imp, "{:>10}", pct(base.ndcg[&k], framework.ndcg[&k]));
    }
    s.push_str(&imp);
    s.push('\n');
    s
}

/// Full-catalog ranking of every held-out target using the adjustment path.
pub fn evaluate_examples(
    net: &Network,
    examples: &[SequenceExample],
    cutoffs: &[usize],
) -> Result<Metrics, HarnessError> {
    let mut ranks = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_BATCH) {
        let refs: Vec<&SequenceExample> = chunk.iter().collect();
        for (scores, ex) in net.inference_batch(&refs)?.iter().zip(chunk) {
            ranks.push(rank_of_target(scores, ex.target));
        }
    }
    Ok(Metrics::from_ranks(&ranks, cutoffs))
}

pub fn evaluate(
    checkpoint: &Checkpoint,
    splits: &DatasetSplits,
    which: Split,
) -> Result<EvalReport, HarnessError> {
    if checkpoint.network.config.n_items != splits.n_items() {
        return Err(HarnessError::CatalogMismatch {
            checkpoint: checkpoint.network.config.n_items,
            splits: splits.n_items(),
        });
    }
    let (examples, name) = match which {
        Split::Validation => (&splits.validation, "validation"),
        Split::Test => (&splits.test, "test"),
    };
    if examples.is_empty() {
        return Err(HarnessError::EmptySplit(name));
    }
    let metrics = evaluate_examples(&checkpoint.network, examples, &CUTOFFS)?;
    Ok(EvalReport {
        split: which,
        metrics,
        n_users: examples.len(),
        seed: checkpoint.config.seed,
        config: checkpoint.config.echo(),
    })
}
