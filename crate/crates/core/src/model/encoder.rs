use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{ModelError, SeqBatch};
use crate::numerics::{AttentionSpec, Graph, ParamId, ParamStore, RngStream, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    /// GRU over the sequence; padding steps leave the state untouched.
    RecurrentGated,
    /// Pre-norm transformer blocks with a causal mask.
    SelfAttentionCausal,
    /// Pre-norm transformer blocks attending over the whole (unpadded) sequence.
    SelfAttentionBidirectional,
}

impl EncoderKind {
    pub const ALL: [EncoderKind; 3] = [
        EncoderKind::RecurrentGated,
        EncoderKind::SelfAttentionCausal,
        EncoderKind::SelfAttentionBidirectional,
    ];

    pub fn default_layers(self) -> usize {
        match self {
            EncoderKind::RecurrentGated => 1,
            _ => 2,
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderKind::RecurrentGated => "gru",
            EncoderKind::SelfAttentionCausal => "sasrec",
            EncoderKind::SelfAttentionBidirectional => "bert",
        })
    }
}

impl FromStr for EncoderKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gru" | "gru4rec" | "recurrent" | "recurrent-gated" => Ok(EncoderKind::RecurrentGated),
            "sasrec" | "causal" | "self-attention-causal" => Ok(EncoderKind::SelfAttentionCausal),
            "bert" | "bert4rec" | "bidirectional" | "self-attention-bidirectional" => {
                Ok(EncoderKind::SelfAttentionBidirectional)
            }
            other => Err(ModelError::Config(format!(
                "unknown encoder '{other}' (gru, sasrec, bert)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
}

impl EncoderSpec {
    pub fn new(kind: EncoderKind, d: usize) -> Self {
        Self {
            kind,
            d,
            layers: kind.default_layers(),
            heads: 2,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d == 0 || self.layers == 0 {
            return Err(ModelError::Config(
                "encoder width and depth must be positive".into(),
            ));
        }
        if self.kind != EncoderKind::RecurrentGated && (self.heads == 0 || self.d % self.heads != 0)
        {
            return Err(ModelError::Config(format!(
                "d = {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct GruLayer {
    w_in: ParamId,
    b_in: ParamId,
    w_hidden: ParamId,
    b_hidden: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AttentionBlock {
    ln1: (ParamId, ParamId),
    wq: (ParamId, ParamId),
    wk: (ParamId, ParamId),
    wv: (ParamId, ParamId),
    wo: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum Layers {
    Gru(Vec<GruLayer>),
    Attention {
        blocks: Vec<AttentionBlock>,
        final_ln: (ParamId, ParamId),
    },
}

/// Maps an embedded sequence `e^u` to hidden states `H^u` of the same shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceEncoder {
    spec: EncoderSpec,
    layers: Layers,
    params: Vec<ParamId>,
}

fn uniform(rng: &mut RngStream, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.uniform_range(-bound, bound)).collect(),
    )
    .unwrap()
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    prefix: String,
    ids: Vec<ParamId>,
}

impl Builder<'_> {
    fn add(&mut self, name: &str, t: Tensor) -> ParamId {
        let id = self.store.add(format!("{}.{}", self.prefix, name), t);
        self.ids.push(id);
        id
    }

    fn linear(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut RngStream,
    ) -> (ParamId, ParamId) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = self.add(
            &format!("{name}.weight"),
            uniform(rng, &[fan_in, fan_out], bound),
        );
        let b = self.add(&format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        (w, b)
    }

    fn norm(&mut self, name: &str, d: usize) -> (ParamId, ParamId) {
        let g = self.add(&format!("{name}.gain"), Tensor::filled(&[d], 1.0));
        let b = self.add(&format!("{name}.bias"), Tensor::zeros(&[d]));
        (g, b)
    }
}

impl SequenceEncoder {
    /// Registers freshly initialized parameters under `prefix`.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        spec: &EncoderSpec,
        rng: &mut RngStream,
    ) -> Result<Self, ModelError> {
        spec.validate()?;
        let d = spec.d;
        let mut b = Builder {
            store,
            prefix: prefix.to_string(),
            ids: Vec::new(),
        };
        let layers = match spec.kind {
            EncoderKind::RecurrentGated => {
                let bound = 1.0 / (d as f64).sqrt();
                let layers = (0..spec.layers)
                    .map(|l| GruLayer {
                        w_in: b.add(&format!("gru{l}.w_in"), uniform(rng, &[d, 3 * d], bound)),
                        b_in: b.add(&format!("gru{l}.b_in"), uniform(rng, &[3 * d], bound)),
                        w_hidden: b.add(
                            &format!("gru{l}.w_hidden"),
                            uniform(rng, &[d, 3 * d], bound),
                        ),
                        b_hidden: b.add(&format!("gru{l}.b_hidden"), uniform(rng, &[3 * d], bound)),
                    })
                    .collect();
                Layers::Gru(layers)
            }
            _ => {
                let blocks = (0..spec.layers)
                    .map(|l| AttentionBlock {
                        ln1: b.norm(&format!("block{l}.ln1"), d),
                        wq: b.linear(&format!("block{l}.query"), d, d, rng),
                        wk: b.linear(&format!("block{l}.key"), d, d, rng),
                        wv: b.linear(&format!("block{l}.value"), d, d, rng),
                        wo: b.linear(&format!("block{l}.out"), d, d, rng),
                        ln2: b.norm(&format!("block{l}.ln2"), d),
                        ff1: b.linear(&format!("block{l}.ff1"), d, d, rng),
                        ff2: b.linear(&format!("block{l}.ff2"), d, d, rng),
                    })
                    .collect();
                let final_ln = b.norm("final_ln", d);
                Layers::Attention { blocks, final_ln }
            }
        };
        let params = b.ids;
        Ok(Self {
            spec: spec.clone(),
            layers,
            params,
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.params
    }

    /// All hidden states, `[batch * seq_len, d]`.
    pub fn hidden_states(&self, g: &mut Graph<'_>, e: Var, batch: &SeqBatch) -> Var {
        match &self.layers {
            Layers::Gru(layers) => {
                let mut x = e;
                for layer in layers {
                    x = self.gru_layer(g, x, layer, batch);
                }
                x
            }
            Layers::Attention { blocks, final_ln } => {
                let mut x = e;
                for block in blocks {
                    x = self.attention_block(g, x, block, batch);
                }
                let (gain, bias) = (g.param(final_ln.0), g.param(final_ln.1));
                g.layer_norm(x, gain, bias)
            }
        }
    }

    /// Final-position state `h_n`, `[batch, d]`.
    pub fn encode(&self, g: &mut Graph<'_>, e: Var, batch: &SeqBatch) -> Var {
        let h = match &self.layers {
            Layers::Gru(layers) if layers.len() == 1 => {
                return self.gru_last(g, e, &layers[0], batch)
            }
            _ => self.hidden_states(g, e, batch),
        };
        g.step_rows(h, batch.seq_len, batch.seq_len - 1)
    }

    fn gru_steps(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        layer: &GruLayer,
        batch: &SeqBatch,
        keep_all: bool,
    ) -> (Var, Vec<Var>) {
        let d = self.spec.d;
        let n = batch.seq_len;
        let (w_in, b_in) = (g.param(layer.w_in), g.param(layer.b_in));
        let (w_h, b_h) = (g.param(layer.w_hidden), g.param(layer.b_hidden));
        let xw = g.matmul(x, w_in);
        let xw = g.add_bias(xw, b_in);
        let mut h = g.constant(Tensor::zeros(&[batch.batch, d]));
        let mut states = Vec::new();
        for t in 0..n {
            let mask = batch.step_mask(t);
            if mask.iter().any(|&m| m != 0.0) {
                let xt = g.step_rows(xw, n, t);
                let hh = g.matmul(h, w_h);
                let hh = g.add_bias(hh, b_h);
                let (xr, hr) = (g.slice_cols(xt, 0, d), g.slice_cols(hh, 0, d));
                let r = g.add(xr, hr);
                let r = g.sigmoid(r);
                let (xz, hz) = (g.slice_cols(xt, d, d), g.slice_cols(hh, d, d));
                let z = g.add(xz, hz);
                let z = g.sigmoid(z);
                let (xn, hn) = (g.slice_cols(xt, 2 * d, d), g.slice_cols(hh, 2 * d, d));
                let rn = g.mul(r, hn);
                let cand = g.add(xn, rn);
                let cand = g.tanh(cand);
                // h' = cand + z * (h - cand)
                let diff = g.sub(h, cand);
                let zd = g.mul(z, diff);
                let next = g.add(cand, zd);
                h = g.blend(mask, next, h);
            }
            if keep_all {
                states.push(h);
            }
        }
        (h, states)
    }

    fn gru_layer(&self, g: &mut Graph<'_>, x: Var, layer: &GruLayer, batch: &SeqBatch) -> Var {
        let (_, states) = self.gru_steps(g, x, layer, batch, true);
        g.interleave(&states)
    }

    fn gru_last(&self, g: &mut Graph<'_>, x: Var, layer: &GruLayer, batch: &SeqBatch) -> Var {
        self.gru_steps(g, x, layer, batch, false).0
    }

    fn linear(g: &mut Graph<'_>, x: Var, (w, b): (ParamId, ParamId)) -> Var {
        let (w, b) = (g.param(w), g.param(b));
        let y = g.matmul(x, w);
        g.add_bias(y, b)
    }

    fn attention_block(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        block: &AttentionBlock,
        batch: &SeqBatch,
    ) -> Var {
        let (g1, b1) = (g.param(block.ln1.0), g.param(block.ln1.1));
        let hnorm = g.layer_norm(x, g1, b1);
        let q = Self::linear(g, hnorm, block.wq);
        let k = Self::linear(g, hnorm, block.wk);
        let v = Self::linear(g, hnorm, block.wv);
        let spec = AttentionSpec {
            batch: batch.batch,
            seq_len: batch.seq_len,
            heads: self.spec.heads,
            causal: self.spec.kind == EncoderKind::SelfAttentionCausal,
            key_valid: batch.key_valid(),
        };
        let att = g.attention(q, k, v, spec);
        let att = Self::linear(g, att, block.wo);
        let x = g.add(x, att);
        let (g2, b2) = (g.param(block.ln2.0), g.param(block.ln2.1));
        let hnorm = g.layer_norm(x, g2, b2);
        let f = Self::linear(g, hnorm, block.ff1);
        let f = g.gelu(f);
        let f = Self::linear(g, f, block.ff2);
        g.add(x, f)
    }
}
