//! Finite-difference check of the full loss on a toy network, for every
//! encoder variant with and without sampling.

use serde::Serialize;

use super::{
    build_loss, Fusion, LossWeights, Network, NetworkConfig, ObjectiveError, ObjectiveSpec,
};
use crate::data::SequenceExample;
use crate::model::EncoderKind;
use crate::numerics::gradcheck::{check_gradients, GradCheckOptions};
use crate::numerics::RngStream;

pub const TOY_ITEMS: usize = 20;
pub const TOY_N_MAX: usize = 5;
pub const TOY_D: usize = 8;

#[derive(Clone, Debug, Serialize)]
pub struct GradientCase {
    pub encoder: EncoderKind,
    pub stochastic: bool,
    pub fusion: Fusion,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradientSuite {
    pub cases: Vec<GradientCase>,
}

impl GradientSuite {
    pub fn max_rel_error(&self) -> f64 {
        self.cases
            .iter()
            .map(|c| c.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() < tol
    }
}

pub fn run_gradient_suite(seed: u64) -> Result<GradientSuite, ObjectiveError> {
    let exs = [
        SequenceExample::from_context(0, &[1, 2, 3, 4], 5, TOY_N_MAX),
        SequenceExample::from_context(1, &[6, 7], 8, TOY_N_MAX),
        SequenceExample::from_context(2, &[9, 10, 11, 12, 13], 14, TOY_N_MAX),
    ];
    let refs: Vec<&SequenceExample> = exs.iter().collect();
    let negatives = [15, 16, 17, 18, 19, 20];
    let spec = ObjectiveSpec {
        weights: LossWeights::new(0.1, 0.01, 0.5)?,
        ..Default::default()
    };
    let root = RngStream::new(seed);
    let mut cases = Vec::new();
    for encoder in EncoderKind::ALL {
        for (stochastic, fusion) in [
            (false, Fusion::Sum),
            (true, Fusion::Sum),
            (true, Fusion::ConcatProjection),
        ] {
            let mut cfg = NetworkConfig::new(TOY_ITEMS, TOY_N_MAX, TOY_D, encoder);
            cfg.stochastic = stochastic;
            cfg.fusion = fusion;
            let net = Network::new(cfg, root.derive("init").seed())?;
            let noise_seed = root.derive("noise").seed();
            let r = check_gradients(&net.params, &GradCheckOptions::default(), |g| {
                let mut noise = RngStream::new(noise_seed);
                build_loss(g, &net, &spec, &refs, &negatives, Some(&mut noise))
                    .expect("toy batch is valid")
                    .0
            })?;
            cases.push(GradientCase {
                encoder,
                stochastic,
                fusion,
                checked: r.checked,
                max_rel_error: r.max_rel_error,
                worst_param: r.worst.map(|w| w.param),
            });
        }
    }
    Ok(GradientSuite { cases })
}
