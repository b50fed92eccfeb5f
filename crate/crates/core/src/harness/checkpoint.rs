use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HarnessError, TrainConfig, TrainOutcome};
use crate::objective::Network;

pub const CHECKPOINT_FORMAT: &str = "invrec-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Trained parameters plus the configuration that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub best_epoch: usize,
    pub validation_ndcg10: Option<f64>,
    pub network: Network,
}

impl Checkpoint {
    pub fn new(config: &TrainConfig, outcome: &TrainOutcome) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            best_epoch: outcome.best_epoch,
            validation_ndcg10: Some(outcome.best_validation),
            network: outcome.network.clone(),
        }
    }

    /// Wraps freshly initialized parameters.
    pub fn untrained(config: &TrainConfig, network: Network) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            best_epoch: 0,
            validation_ndcg10: None,
            network,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(format!("unexpected format tag '{}'", ck.format));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            ));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        std::fs::write(path, self.to_json()).map_err(|e| HarnessError::Checkpoint {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let err = |detail: String| HarnessError::Checkpoint {
            path: path.display().to_string(),
            detail,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        Self::from_json(&text).map_err(err)
    }
}
