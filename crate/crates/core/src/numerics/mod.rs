//! Dense numerical core: tensors, the gradient tape, Adam, and seeded sampling.

mod adam;
pub mod gradcheck;
mod graph;
mod rng;
mod tensor;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use graph::{AttentionSpec, Gradients, Graph, NamedTensor, ParamId, ParamStore, Var};
pub use rng::RngStream;
pub use tensor::Tensor;

pub(crate) use tensor::gemm;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Logistic function, stable over the whole real line.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus_scalar`] for `y > 0`.
pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Reparameterized Gaussian draw `mu + eps * sigma`, `eps ~ N(0, I)`.
pub fn reparameterize(
    mu: &Tensor,
    sigma: &Tensor,
    rng: &mut RngStream,
) -> Result<Tensor, NumericsError> {
    let eps = Tensor::new(mu.shape().to_vec(), rng.normals(mu.len()))?;
    reparameterize_with(mu, sigma, &eps)
}

/// Same as [`reparameterize`] with the noise supplied by the caller.
pub fn reparameterize_with(
    mu: &Tensor,
    sigma: &Tensor,
    eps: &Tensor,
) -> Result<Tensor, NumericsError> {
    if !mu.same_shape(sigma) || !mu.same_shape(eps) {
        return Err(NumericsError::ShapeMismatch {
            op: "reparameterize",
            detail: format!(
                "mu {:?}, sigma {:?}, eps {:?}",
                mu.shape(),
                sigma.shape(),
                eps.shape()
            ),
        });
    }
    if let Some(s) = sigma.data().iter().find(|s| !(**s >= 0.0)) {
        return Err(NumericsError::InvalidArgument(format!(
            "sigma entries must be non-negative, found {s}"
        )));
    }
    let data = mu
        .data()
        .iter()
        .zip(sigma.data())
        .zip(eps.data())
        .map(|((m, s), e)| m + e * s)
        .collect();
    Tensor::new(mu.shape().to_vec(), data)
}
