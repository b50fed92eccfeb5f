//! The invariant-representation objective: an adjustment encoder producing
//! `t`, a confounder encoder producing `s`, the four-term loss, and
//! inference from `t` alone.

mod gradsuite;
pub mod identity;

pub use gradsuite::{run_gradient_suite, GradientCase, GradientSuite, TOY_D, TOY_ITEMS, TOY_N_MAX};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SequenceExample;
use crate::model::{
    bpr_graph, bpr_loss, score_batch, EmbeddingTable, EncoderKind, EncoderSpec, ModelError, Scores,
    SeqBatch, SequenceEncoder,
};
use crate::numerics::{
    inverse_softplus, Graph, NumericsError, ParamId, ParamStore, RngStream, Tensor, Var,
};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(
        "sigma contains an exact zero; ln(sigma^2) is undefined, use deterministic mode instead"
    )]
    ZeroSigma,
    #[error("negative set is empty")]
    NoNegatives,
    #[error("probability table is not normalized: {0}")]
    NotNormalized(String),
    #[error("invalid loss weights: {0}")]
    Weights(String),
    #[error("the network has no confounder encoder")]
    NoConfounder,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            beta: 0.01,
            gamma: 0.5,
        }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self, ObjectiveError> {
        let w = Self { alpha, beta, gamma };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite())
            || !(self.beta >= 0.0 && self.beta.is_finite())
        {
            return Err(ObjectiveError::Weights(
                "alpha and beta must be finite and non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(ObjectiveError::Weights(format!(
                "gamma = {} must lie in [0, 1]",
                self.gamma
            )));
        }
        Ok(())
    }

    /// Non-fatal concerns about the weights.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.alpha > self.gamma {
            w.push(format!(
                "alpha = {} exceeds gamma = {}: the H(y|s) term enters with a positive sign",
                self.alpha, self.gamma
            ));
        }
        w
    }

    pub fn coef_a(&self) -> f64 {
        1.0 - self.gamma
    }

    pub fn coef_b(&self) -> f64 {
        self.gamma - self.alpha
    }

    pub fn coef_c(&self) -> f64 {
        self.gamma
    }

    pub fn coef_d(&self) -> f64 {
        self.beta
    }
}

/// Which loss terms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermMask {
    pub a: bool,
    pub b: bool,
    pub c: bool,
    pub d: bool,
}

impl Default for TermMask {
    fn default() -> Self {
        Self::ALL
    }
}

impl TermMask {
    pub const ALL: TermMask = TermMask {
        a: true,
        b: true,
        c: true,
        d: true,
    };

    pub fn without(mut self, term: char) -> Self {
        match term {
            'a' => self.a = false,
            'b' => self.b = false,
            'c' => self.c = false,
            'd' => self.d = false,
            _ => {}
        }
        self
    }

    pub fn needs_confounder(&self) -> bool {
        self.b || self.c
    }
}

impl fmt::Display for TermMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let on: Vec<&str> = [(self.a, "a"), (self.b, "b"), (self.c, "c"), (self.d, "d")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        f.write_str(&on.join(","))
    }
}

impl FromStr for TermMask {
    type Err = ObjectiveError;

    /// Comma-separated list of active terms, e.g. `a,b,c,d` or `a`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut m = TermMask {
            a: false,
            b: false,
            c: false,
            d: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "a" => m.a = true,
                "b" => m.b = true,
                "c" => m.c = true,
                "d" => m.d = true,
                other => {
                    return Err(ObjectiveError::Weights(format!(
                        "unknown loss term '{other}' (a, b, c, d)"
                    )))
                }
            }
        }
        Ok(m)
    }
}

/// The four weighted terms and their signed sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// `(1 - gamma) H(y|t)`
    pub term_a: f64,
    /// `(gamma - alpha) H(y|s)`, entering the total with a minus sign.
    pub term_b: f64,
    /// `gamma H(y|t,s)`
    pub term_c: f64,
    /// `beta` times the compression penalty.
    pub term_d: f64,
    pub total: f64,
}

/// Unweighted conditional ranking losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TermValues {
    pub h_t: f64,
    pub h_s: f64,
    pub h_ts: f64,
}

/// Weights the parts; masked terms are reported as zero. `comp` is the
/// compression penalty, `||mu||^2` in deterministic mode.
pub fn total_loss(parts: TermValues, comp: f64, w: &LossWeights, mask: TermMask) -> LossBreakdown {
    let on = |m: bool, v: f64| if m { v } else { 0.0 };
    let term_a = on(mask.a, w.coef_a() * parts.h_t);
    let term_b = on(mask.b, w.coef_b() * parts.h_s);
    let term_c = on(mask.c, w.coef_c() * parts.h_ts);
    let term_d = on(mask.d, w.coef_d() * comp);
    LossBreakdown {
        term_a,
        term_b,
        term_c,
        term_d,
        total: term_a - term_b + term_c + term_d,
    }
}

/// `mu`, `sigma` and the sampled `t` for one sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StochasticEmbedding {
    pub mu: Tensor,
    pub sigma: Tensor,
    pub t: Tensor,
    pub deterministic: bool,
}

impl StochasticEmbedding {
    pub fn deterministic(mu: Tensor) -> Self {
        let sigma = Tensor::zeros(mu.shape());
        Self {
            t: mu.clone(),
            mu,
            sigma,
            deterministic: true,
        }
    }

    pub fn sample(mu: Tensor, sigma: Tensor, rng: &mut RngStream) -> Result<Self, ObjectiveError> {
        let t = crate::numerics::reparameterize(&mu, &sigma, rng)?;
        Ok(Self {
            mu,
            sigma,
            t,
            deterministic: false,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualRepresentation {
    pub adjustment: StochasticEmbedding,
    pub confounder: Tensor,
}

/// `KL(N(mu, diag sigma^2) || N(0, I))`; `1/2 ||mu||^2` in deterministic mode.
pub fn compression_term(emb: &StochasticEmbedding) -> Result<f64, ObjectiveError> {
    let half_norm = 0.5 * emb.mu.sum_squares();
    if emb.deterministic {
        return Ok(half_norm);
    }
    let mut acc = 0.0;
    for &s in emb.sigma.data() {
        if s == 0.0 {
            return Err(ObjectiveError::ZeroSigma);
        }
        let s2 = s * s;
        acc += s2 - s2.ln() - 1.0;
    }
    Ok(half_norm + 0.5 * acc)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    T,
    S,
    Ts,
}

/// Mean BPR loss of `target` against each negative, scoring with `t`, `s` or
/// `t + s` against the item matrix.
pub fn conditional_bpr(
    target: usize,
    negatives: &[usize],
    reps: &DualRepresentation,
    item_matrix: &Tensor,
    which: Condition,
) -> Result<f64, ObjectiveError> {
    if negatives.is_empty() {
        return Err(ObjectiveError::NoNegatives);
    }
    let t = reps.adjustment.t.data();
    let s = reps.confounder.data();
    let h: Vec<f64> = match which {
        Condition::T => t.to_vec(),
        Condition::S => s.to_vec(),
        Condition::Ts => t.iter().zip(s).map(|(a, b)| a + b).collect(),
    };
    let score = |i: usize| {
        h.iter()
            .zip(item_matrix.row(i))
            .map(|(a, b)| a * b)
            .sum::<f64>()
    };
    let pos = score(target);
    Ok(negatives
        .iter()
        .map(|&j| bpr_loss(pos, score(j)))
        .sum::<f64>()
        / negatives.len() as f64)
}

/// How `t` and `s` are combined for `H(y|t,s)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    #[default]
    Sum,
    /// `[t, s] W + b`, with `W` starting as two stacked identities.
    ConcatProjection,
}

impl FromStr for Fusion {
    type Err = ObjectiveError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sum" => Ok(Fusion::Sum),
            "concat" | "concat-projection" => Ok(Fusion::ConcatProjection),
            other => Err(ObjectiveError::Weights(format!(
                "unknown fusion '{other}' (sum, concat)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub n_items: usize,
    pub n_max: usize,
    pub d: usize,
    pub adjustment: EncoderSpec,
    /// `None` builds a plain single-encoder recommender.
    pub confounder: Option<EncoderSpec>,
    pub stochastic: bool,
    pub sigma_init: f64,
    pub fusion: Fusion,
}

impl NetworkConfig {
    pub fn new(n_items: usize, n_max: usize, d: usize, kind: EncoderKind) -> Self {
        let spec = EncoderSpec::new(kind, d);
        Self {
            n_items,
            n_max,
            d,
            adjustment: spec.clone(),
            confounder: Some(spec),
            stochastic: false,
            sigma_init: 0.1,
            fusion: Fusion::Sum,
        }
    }
}

/// All parameters of the dual-encoder recommender.
///
/// Each component draws its initial values from its own derived stream, so
/// shared components start identical whether or not the confounder exists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub config: NetworkConfig,
    pub params: ParamStore,
    pub tables: EmbeddingTable,
    pub adjustment: SequenceEncoder,
    pub sigma_head: Option<(ParamId, ParamId)>,
    pub confounder: Option<SequenceEncoder>,
    pub fusion: Option<(ParamId, ParamId)>,
}

/// Graph nodes of the adjustment path for a batch.
#[derive(Clone, Copy, Debug)]
pub struct AdjustmentVars {
    pub mu: Var,
    pub sigma: Option<Var>,
    pub t: Var,
}

impl Network {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self, ObjectiveError> {
        if config.adjustment.d != config.d
            || config.confounder.as_ref().is_some_and(|c| c.d != config.d)
        {
            return Err(ModelError::Config("encoder widths must equal d".into()).into());
        }
        if config.stochastic && !(config.sigma_init > 0.0) {
            return Err(ModelError::Config("sigma_init must be positive".into()).into());
        }
        let root = RngStream::new(seed);
        let mut params = ParamStore::new();
        let d = config.d;
        let tables = EmbeddingTable::new(
            &mut params,
            config.n_items,
            config.n_max,
            d,
            &mut root.derive("embedding"),
        );
        let adjustment = SequenceEncoder::new(
            &mut params,
            "adjustment",
            &config.adjustment,
            &mut root.derive("adjustment"),
        )?;
        let sigma_head = config.stochastic.then(|| {
            let mut rng = root.derive("sigma");
            let bound = 0.01 / (d as f64).sqrt();
            let w = Tensor::new(
                vec![d, d],
                (0..d * d)
                    .map(|_| rng.uniform_range(-bound, bound))
                    .collect(),
            )
            .unwrap();
            let b = Tensor::filled(&[d], inverse_softplus(config.sigma_init));
            (
                params.add("sigma_head.weight", w),
                params.add("sigma_head.bias", b),
            )
        });
        let confounder = match &config.confounder {
            Some(spec) => Some(SequenceEncoder::new(
                &mut params,
                "confounder",
                spec,
                &mut root.derive("confounder"),
            )?),
            None => None,
        };
        let fusion = (config.confounder.is_some() && config.fusion == Fusion::ConcatProjection)
            .then(|| {
                let mut w = Tensor::zeros(&[2 * d, d]);
                for j in 0..d {
                    w.row_mut(j)[j] = 1.0;
                    w.row_mut(d + j)[j] = 1.0;
                }
                (
                    params.add("fusion.weight", w),
                    params.add("fusion.bias", Tensor::zeros(&[d])),
                )
            });
        Ok(Self {
            config,
            params,
            tables,
            adjustment,
            sigma_head,
            confounder,
            fusion,
        })
    }

    pub fn embed(&self, g: &mut Graph<'_>, batch: &SeqBatch) -> Var {
        self.tables.embed(g, batch)
    }

    /// `mu = h_n`, `sigma = softplus(mu W + b)`, `t = mu + eps * sigma`.
    /// Without `noise` (or without a sigma head) `t = mu`.
    pub fn adjustment_graph(
        &self,
        g: &mut Graph<'_>,
        e: Var,
        batch: &SeqBatch,
        noise: Option<&mut RngStream>,
    ) -> AdjustmentVars {
        let mu = self.adjustment.encode(g, e, batch);
        let Some((w, b)) = self.sigma_head else {
            return AdjustmentVars {
                mu,
                sigma: None,
                t: mu,
            };
        };
        let (w, b) = (g.param(w), g.param(b));
        let pre = g.matmul(mu, w);
        let pre = g.add_bias(pre, b);
        let sigma = g.softplus(pre);
        let t = match noise {
            Some(rng) => {
                let shape = g.value(mu).shape().to_vec();
                let eps = Tensor::new(shape.clone(), rng.normals(shape.iter().product())).unwrap();
                let spread = g.mul_const(sigma, eps);
                g.add(mu, spread)
            }
            None => mu,
        };
        AdjustmentVars {
            mu,
            sigma: Some(sigma),
            t,
        }
    }

    /// `s` from the confounder encoder; `detach_input` keeps its loss terms
    /// from reaching the shared embeddings.
    pub fn confounder_graph(
        &self,
        g: &mut Graph<'_>,
        e: Var,
        batch: &SeqBatch,
        detach_input: bool,
    ) -> Result<Var, ObjectiveError> {
        let enc = self
            .confounder
            .as_ref()
            .ok_or(ObjectiveError::NoConfounder)?;
        let e = if detach_input { g.detach(e) } else { e };
        Ok(enc.encode(g, e, batch))
    }

    pub fn fuse(&self, g: &mut Graph<'_>, t: Var, s: Var) -> Var {
        match self.fusion {
            None => g.add(t, s),
            Some((w, b)) => {
                let ts = g.concat_cols(t, s);
                let (w, b) = (g.param(w), g.param(b));
                let y = g.matmul(ts, w);
                g.add_bias(y, b)
            }
        }
    }

    /// Single-sequence adjustment embedding; samples `t` when the network is
    /// stochastic and `rng` is given.
    pub fn adjustment_forward(
        &self,
        items: &[usize],
        rng: Option<&mut RngStream>,
    ) -> Result<StochasticEmbedding, ObjectiveError> {
        self.tables.check_items(items)?;
        let batch = SeqBatch::from_rows(&[items]);
        let mut g = Graph::new(&self.params);
        let e = self.embed(&mut g, &batch);
        let vars = self.adjustment_graph(&mut g, e, &batch, None);
        let mu = Tensor::vector(g.value(vars.mu).data().to_vec());
        match (vars.sigma, rng) {
            (Some(sigma), Some(rng)) => {
                let sigma = Tensor::vector(g.value(sigma).data().to_vec());
                StochasticEmbedding::sample(mu, sigma, rng)
            }
            _ => Ok(StochasticEmbedding::deterministic(mu)),
        }
    }

    pub fn confounder_forward(&self, items: &[usize]) -> Result<Tensor, ObjectiveError> {
        self.tables.check_items(items)?;
        let batch = SeqBatch::from_rows(&[items]);
        let mut g = Graph::new(&self.params);
        let e = self.embed(&mut g, &batch);
        let s = self.confounder_graph(&mut g, e, &batch, false)?;
        Ok(Tensor::vector(g.value(s).data().to_vec()))
    }

    /// Scores from `mu` alone; the confounder encoder is never evaluated.
    pub fn inference_scores(&self, example: &SequenceExample) -> Result<Scores, ObjectiveError> {
        Ok(self.inference_batch(&[example])?.pop().expect("one row"))
    }

    pub fn inference_batch(
        &self,
        examples: &[&SequenceExample],
    ) -> Result<Vec<Scores>, ObjectiveError> {
        for ex in examples {
            self.tables.check_items(&ex.items)?;
        }
        let batch = SeqBatch::from_examples(examples);
        let mut g = Graph::new(&self.params);
        let e = self.embed(&mut g, &batch);
        let mu = self.adjustment.encode(&mut g, e, &batch);
        Ok(score_batch(g.value(mu), self.params.get(self.tables.items)))
    }

    pub fn item_matrix(&self) -> &Tensor {
        self.params.get(self.tables.items)
    }

    /// Parameter ids owned by the confounder path.
    pub fn confounder_params(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self
            .confounder
            .iter()
            .flat_map(|c| c.param_ids().iter().copied())
            .collect();
        if let Some((w, b)) = self.fusion {
            ids.extend([w, b]);
        }
        ids
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    /// Mean BPR loss on `t` only.
    Base,
    /// The four-term objective.
    Invariant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    pub weights: LossWeights,
    pub mask: TermMask,
    /// Feed the confounder a gradient-free copy of the embeddings.
    pub detach_confounder: bool,
    /// Score `H(y|s)` with a detached `s`, so that term cannot train the confounder encoder.
    pub stop_term_b_gradient: bool,
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        Self {
            kind: ObjectiveKind::Invariant,
            weights: LossWeights::default(),
            mask: TermMask::ALL,
            detach_confounder: false,
            stop_term_b_gradient: false,
        }
    }
}

/// Builds the batch loss. `negatives` holds `k` ids per example, grouped by
/// example; the same negatives serve every conditional term.
pub fn build_loss(
    g: &mut Graph<'_>,
    net: &Network,
    spec: &ObjectiveSpec,
    examples: &[&SequenceExample],
    negatives: &[usize],
    noise: Option<&mut RngStream>,
) -> Result<(Var, LossBreakdown), ObjectiveError> {
    if negatives.is_empty() || negatives.len() % examples.len() != 0 {
        return Err(ObjectiveError::NoNegatives);
    }
    let k = negatives.len() / examples.len();
    let batch = SeqBatch::from_examples(examples);
    let targets: Vec<usize> = examples.iter().map(|e| e.target).collect();
    let e = net.embed(g, &batch);
    let adj = net.adjustment_graph(g, e, &batch, noise);
    let m = g.param(net.tables.items);
    let pos = g.gather_rows(m, &targets);
    let neg = g.gather_rows(m, negatives);
    let h_t = bpr_graph(g, adj.t, pos, neg, k);
    let value = |g: &Graph<'_>, v: Var| g.value(v).data()[0];

    if spec.kind == ObjectiveKind::Base {
        let v = value(g, h_t);
        return Ok((
            h_t,
            LossBreakdown {
                term_a: v,
                total: v,
                ..Default::default()
            },
        ));
    }

    let w = &spec.weights;
    let mask = spec.mask;
    let mut parts = TermValues {
        h_t: value(g, h_t),
        ..Default::default()
    };
    let mut terms: Vec<(Var, f64)> = Vec::new();
    if mask.a {
        terms.push((h_t, w.coef_a()));
    }
    if mask.needs_confounder() {
        let s = net.confounder_graph(g, e, &batch, spec.detach_confounder)?;
        if mask.b {
            let s_b = if spec.stop_term_b_gradient {
                g.detach(s)
            } else {
                s
            };
            let h_s = bpr_graph(g, s_b, pos, neg, k);
            parts.h_s = value(g, h_s);
            terms.push((h_s, -w.coef_b()));
        }
        if mask.c {
            let ts = net.fuse(g, adj.t, s);
            let h_ts = bpr_graph(g, ts, pos, neg, k);
            parts.h_ts = value(g, h_ts);
            terms.push((h_ts, w.coef_c()));
        }
    }
    let mut comp = 0.0;
    if mask.d {
        let c = compression_graph(g, adj, examples.len());
        comp = value(g, c);
        terms.push((c, w.coef_d()));
    }
    if terms.is_empty() {
        return Err(ObjectiveError::Weights("every loss term is masked".into()));
    }
    let loss = g.combine(&terms);
    Ok((loss, total_loss(parts, comp, w, mask)))
}

/// Batch mean of `||mu||^2 + sum(sigma^2 - ln sigma^2 - 1)`, twice the Gaussian
/// KL to the standard normal; `||mu||^2` alone without a sigma head.
pub fn compression_graph(g: &mut Graph<'_>, adj: AdjustmentVars, batch: usize) -> Var {
    let inv = 1.0 / batch as f64;
    let sq = g.square(adj.mu);
    let norm = g.sum(sq);
    let Some(sigma) = adj.sigma else {
        return g.scale(norm, inv);
    };
    let s2 = g.square(sigma);
    let s2_sum = g.sum(s2);
    let ln_s2 = g.ln(s2);
    let ln_sum = g.sum(ln_s2);
    let count = g.value(sigma).len() as f64;
    let one = g.constant(Tensor::scalar(1.0));
    g.combine(&[
        (norm, inv),
        (s2_sum, inv),
        (ln_sum, -inv),
        (one, -count * inv),
    ])
}

#[cfg(test)]
mod tests;
