//! Training loop, evaluation protocol, checkpoints and ablations.

mod ablate;
mod checkpoint;
mod eval;
pub mod metrics;
mod train;

pub use ablate::{ablate, AblationRow, AblationTable, ABLATION_ROWS};
pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use eval::{comparison_table, evaluate, evaluate_examples, EvalReport, Split};
pub use metrics::{hr_at_k, ndcg_at_k, rank_of_target, rank_of_target_masked, Metrics, CUTOFFS};
pub use train::{train, EpochRecord, StepRecord, TrainLog, TrainOutcome};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{EncoderKind, EncoderSpec, ModelError};
use crate::numerics::NumericsError;
use crate::objective::{
    Fusion, LossBreakdown, NetworkConfig, ObjectiveError, ObjectiveKind, ObjectiveSpec,
};

pub const LR_GRID: [f64; 3] = [1e-3, 5e-4, 1e-4];
pub const WEIGHT_DECAY_GRID: [f64; 4] = [1e-4, 1e-6, 1e-8, 0.0];

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("training split is empty")]
    EmptyTrain,
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, step {step}: non-finite loss or gradient ({breakdown:?})")]
    Divergence {
        epoch: usize,
        step: usize,
        breakdown: LossBreakdown,
    },
    #[error("checkpoint catalog has {checkpoint} items but the splits have {splits}")]
    CatalogMismatch { checkpoint: usize, splits: usize },
    #[error("cannot use checkpoint {path}: {detail}")]
    Checkpoint { path: String, detail: String },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub encoder: EncoderKind,
    /// Defaults to the adjustment encoder's variant.
    pub confounder_encoder: Option<EncoderKind>,
    pub d: usize,
    pub layers: Option<usize>,
    pub heads: usize,
    pub batch_size: usize,
    pub n_max: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub objective: ObjectiveSpec,
    pub stochastic: bool,
    pub sigma_init: f64,
    pub fusion: Fusion,
    /// Sampled negatives per positive.
    pub negatives: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Permit learning rates and weight decays outside the standard grids.
    pub allow_off_grid: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderKind::SelfAttentionCausal,
            confounder_encoder: None,
            d: 64,
            layers: None,
            heads: 2,
            batch_size: 256,
            n_max: 20,
            lr: 1e-3,
            weight_decay: 0.0,
            objective: ObjectiveSpec::default(),
            stochastic: false,
            sigma_init: 0.1,
            fusion: Fusion::Sum,
            negatives: 1,
            max_epochs: 200,
            patience: 10,
            seed: 0,
            allow_off_grid: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.d == 0
            || self.batch_size == 0
            || self.n_max == 0
            || self.negatives == 0
            || self.max_epochs == 0
        {
            return bad("d, batch_size, n_max, negatives and max_epochs must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite())
            || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite())
        {
            return bad("lr must be positive and weight_decay non-negative".into());
        }
        if !self.allow_off_grid {
            if !LR_GRID.contains(&self.lr) {
                return bad(format!(
                    "lr = {} is not in {LR_GRID:?} (set allow_off_grid to override)",
                    self.lr
                ));
            }
            if !WEIGHT_DECAY_GRID.contains(&self.weight_decay) {
                return bad(format!(
                    "weight_decay = {} is not in {WEIGHT_DECAY_GRID:?} (set allow_off_grid to override)",
                    self.weight_decay
                ));
            }
        }
        self.objective.weights.validate()?;
        self.encoder_spec(self.encoder).validate()?;
        Ok(())
    }

    fn encoder_spec(&self, kind: EncoderKind) -> EncoderSpec {
        let mut spec = EncoderSpec::new(kind, self.d);
        spec.heads = self.heads;
        if let Some(l) = self.layers {
            spec.layers = l;
        }
        spec
    }

    pub fn network_config(&self, n_items: usize) -> NetworkConfig {
        let dual = self.objective.kind == ObjectiveKind::Invariant;
        NetworkConfig {
            n_items,
            n_max: self.n_max,
            d: self.d,
            adjustment: self.encoder_spec(self.encoder),
            confounder: dual
                .then(|| self.encoder_spec(self.confounder_encoder.unwrap_or(self.encoder))),
            stochastic: self.stochastic,
            sigma_init: self.sigma_init,
            fusion: self.fusion,
        }
    }

    /// Same config with the plain single-encoder ranking objective.
    pub fn as_base(&self) -> TrainConfig {
        let mut c = self.clone();
        c.objective.kind = ObjectiveKind::Base;
        c
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests;
