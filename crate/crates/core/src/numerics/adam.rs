use serde::{Deserialize, Serialize};

use super::graph::{Gradients, ParamStore};
use super::tensor::Tensor;
use super::NumericsError;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Moment accumulators for every parameter of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.tensor.shape()))
            .collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction.
///
/// Weight decay enters as an L2 term `weight_decay * param` added to the
/// gradient before the moment updates.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<(), NumericsError> {
    if !(lr > 0.0) {
        return Err(NumericsError::InvalidArgument(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    if !(weight_decay >= 0.0) {
        return Err(NumericsError::InvalidArgument(format!(
            "weight decay must be non-negative, got {weight_decay}"
        )));
    }
    if grads.params().len() != params.len() || state.first.len() != params.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "adam_step",
            detail: format!(
                "{} parameters, {} gradients, {} accumulators",
                params.len(),
                grads.params().len(),
                state.first.len()
            ),
        });
    }
    for id in 0..params.len() {
        let g = grads.param(id);
        if g.shape() != params.get(id).shape() || state.first[id].shape() != g.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "adam_step",
                detail: format!(
                    "parameter '{}' shape {:?} vs gradient {:?}",
                    params.name(id),
                    params.get(id).shape(),
                    g.shape()
                ),
            });
        }
    }

    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - BETA1.powf(t);
    let c2 = 1.0 - BETA2.powf(t);
    for id in 0..params.len() {
        let g = grads.param(id).data();
        let m = state.first[id].data_mut();
        let v = state.second[id].data_mut();
        let p = params.get_mut(id).data_mut();
        for i in 0..p.len() {
            let gi = g[i] + weight_decay * p[i];
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
    Ok(())
}
