use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::eval::evaluate_examples;
use super::{HarnessError, TrainConfig};
use crate::data::{DatasetSplits, SequenceExample};
use crate::model::NegativeSampler;
use crate::numerics::{adam_step, AdamState, Graph, NumericsError, RngStream};
use crate::objective::{build_loss, LossBreakdown, Network};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub validation_ndcg10: f64,
    pub improved: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub warnings: Vec<String>,
}

impl TrainLog {
    /// One json record per optimizer step.
    pub fn steps_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation NDCG@10.
    pub network: Network,
    pub best_epoch: usize,
    pub best_validation: f64,
    pub log: TrainLog,
}

/// Items in each user's training examples (contexts and targets).
fn seen_in_train(splits: &DatasetSplits) -> Vec<HashSet<usize>> {
    let mut seen = vec![HashSet::new(); splits.catalog.n_users()];
    for ex in &splits.train {
        seen[ex.user].extend(ex.history().iter().copied());
        seen[ex.user].insert(ex.target);
    }
    seen
}

/// Mini-batch Adam on the configured objective with early stopping on
/// validation NDCG@10. Stops once `patience` consecutive epochs fail to improve.
pub fn train(splits: &DatasetSplits, config: &TrainConfig) -> Result<TrainOutcome, HarnessError> {
    config.validate()?;
    if splits.train.is_empty() {
        return Err(HarnessError::EmptyTrain);
    }
    if splits.validation.is_empty() {
        return Err(HarnessError::EmptySplit("validation"));
    }
    if splits.n_max > config.n_max {
        return Err(HarnessError::Config(format!(
            "splits were built with n_max = {} but the model holds {} positions",
            splits.n_max, config.n_max
        )));
    }
    let root = RngStream::new(config.seed);
    let mut net = Network::new(
        config.network_config(splits.n_items()),
        root.derive("init").seed(),
    )?;
    let mut shuffle_rng = root.derive("shuffle");
    let mut negative_rng = root.derive("negatives");
    let mut noise_rng = root.derive("noise");
    let sampler = NegativeSampler::new(splits.n_items(), seen_in_train(splits));
    let mut adam = AdamState::new(&net.params);
    let mut log = TrainLog {
        warnings: config.objective.weights.warnings(),
        ..Default::default()
    };

    let mut best = (f64::NEG_INFINITY, 0usize, net.clone());
    let mut bad_epochs = 0;
    let mut order: Vec<usize> = (0..splits.train.len()).collect();
    let mut step = 0;
    for epoch in 0..config.max_epochs {
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let examples: Vec<&SequenceExample> = chunk.iter().map(|&i| &splits.train[i]).collect();
            let users: Vec<usize> = examples.iter().map(|e| e.user).collect();
            let negatives = sampler.sample_many(&users, config.negatives, &mut negative_rng)?;
            let noise = config.stochastic.then_some(&mut noise_rng);
            let grads = {
                let mut g = Graph::new(&net.params);
                let (loss, breakdown) = build_loss(
                    &mut g,
                    &net,
                    &config.objective,
                    &examples,
                    &negatives,
                    noise,
                )?;
                let diverged = HarnessError::Divergence {
                    epoch,
                    step,
                    breakdown,
                };
                if !breakdown.total.is_finite() || g.fault().is_some() {
                    return Err(diverged);
                }
                let grads = match g.backward(loss) {
                    Ok(grads) => grads,
                    Err(NumericsError::NonFinite(_)) => return Err(diverged),
                    Err(e) => return Err(e.into()),
                };
                log.steps.push(StepRecord {
                    step,
                    epoch,
                    loss: breakdown,
                });
                loss_sum += breakdown.total;
                grads
            };
            adam_step(
                &mut net.params,
                &grads,
                &mut adam,
                config.lr,
                config.weight_decay,
            )?;
            step += 1;
            batches += 1;
        }
        let validation = evaluate_examples(&net, &splits.validation, &[10])?.ndcg[&10];
        let improved = validation > best.0;
        log.epochs.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / batches as f64,
            validation_ndcg10: validation,
            improved,
        });
        if improved {
            best = (validation, epoch, net.clone());
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs > config.patience {
                break;
            }
        }
    }
    let (best_validation, best_epoch, network) = best;
    Ok(TrainOutcome {
        network,
        best_epoch,
        best_validation,
        log,
    })
}
