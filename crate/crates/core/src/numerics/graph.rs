//! Define-by-run reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] is built fresh for every batch. Parameters are read from a
//! [`ParamStore`] the graph borrows; [`Graph::backward`] returns one gradient
//! tensor per stored parameter (zero for parameters the loss never touched).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::tensor::{gemm, gemm_strided, Tensor};
use super::{sigmoid_scalar, softplus_scalar, NumericsError};

const LAYER_NORM_EPS: f64 = 1e-8;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub type ParamId = usize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Owned, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<NamedTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.entries.push(NamedTensor {
            name: name.into(),
            tensor,
        });
        self.entries.len() - 1
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id].name
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &NamedTensor)> {
        self.entries.iter().enumerate()
    }

    pub fn entries(&self) -> &[NamedTensor] {
        &self.entries
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }
}

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Attention geometry for [`Graph::attention`].
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub batch: usize,
    pub seq_len: usize,
    pub heads: usize,
    pub causal: bool,
    /// One flag per row of the `(batch * seq_len) x d` inputs.
    pub key_valid: Vec<bool>,
}

enum Op {
    Constant,
    Input,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        a_t: bool,
        b_t: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Softplus(Var),
    Ln(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Combine(Vec<(Var, f64)>),
    Embed {
        table: Var,
        pos: Var,
        items: Vec<usize>,
        seq_len: usize,
    },
    GatherRows {
        src: Var,
        idx: Vec<usize>,
    },
    RepeatRows {
        src: Var,
        times: usize,
    },
    StepRows {
        src: Var,
        seq_len: usize,
        step: usize,
    },
    Interleave {
        steps: Vec<Var>,
    },
    RowDot(Var, Var),
    SliceCols {
        src: Var,
        start: usize,
    },
    ConcatCols(Var, Var),
    Blend {
        mask: Vec<f64>,
        a: Var,
        b: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    params: Vec<Tensor>,
    inputs: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            params: store
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.tensor.shape()))
                .collect(),
            inputs: HashMap::new(),
        }
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[id]
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// Gradient with respect to a node created by [`Graph::input`].
    pub fn input(&self, var: Var) -> Option<&Tensor> {
        self.inputs.get(&var.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|t| t.data().iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
    fault: Option<&'static str>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            fault: None,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Name of the first operation that produced a non-finite value, if any.
    pub fn fault(&self) -> Option<&'static str> {
        self.fault
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Var {
        if self.fault.is_none() && !value.is_finite() {
            self.fault = Some(name);
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push("constant", t, Op::Constant, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::input`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push("input", t, Op::Input, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let value = self.params.get(id).clone();
        let v = self.push("param", value, Op::Param(id), true);
        self.param_nodes.insert(id, v);
        v
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.val(v).clone();
        self.constant(value)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, a_t: bool, b_t: bool) -> Var {
        let (ta, tb) = (self.val(a), self.val(b));
        let (m, k) = if a_t {
            (ta.cols(), ta.rows())
        } else {
            (ta.rows(), ta.cols())
        };
        let (k2, n) = if b_t {
            (tb.cols(), tb.rows())
        } else {
            (tb.rows(), tb.cols())
        };
        assert_eq!(k, k2, "matmul inner dimensions differ");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), a_t, tb.data(), b_t, &mut out, false);
        let needs = self.needs(a) || self.needs(b);
        self.push(
            "matmul",
            Tensor::new(vec![m, n], out).unwrap(),
            Op::MatMul { a, b, a_t, b_t },
            needs,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false, false)
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false, true)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Var {
        let (ta, tb) = (self.val(a), self.val(b));
        assert_eq!(ta.len(), tb.len(), "{name}: operand sizes differ");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let needs = self.needs(a) || self.needs(b);
        self.push(name, value, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds the vector `bias` to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (ta, tb) = (self.val(a), self.val(bias));
        let c = ta.cols();
        assert_eq!(
            tb.len(),
            c,
            "add_bias: bias length differs from column count"
        );
        let mut out = ta.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let needs = self.needs(a) || self.needs(bias);
        self.push("add_bias", out, Op::AddBias(a, bias), needs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.val(a).map(|x| x * c);
        let needs = self.needs(a);
        self.push("scale", out, Op::Scale(a, c), needs)
    }

    /// Elementwise product with a constant tensor of the same size.
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Var {
        let ta = self.val(a);
        assert_eq!(ta.len(), c.len(), "mul_const: sizes differ");
        let data = ta.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let needs = self.needs(a);
        self.push("mul_const", out, Op::MulConst(a, c), needs)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.val(a).map(f);
        let needs = self.needs(a);
        self.push(name, out, op, needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary("sigmoid", a, sigmoid_scalar, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(
            "gelu",
            a,
            |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()),
            Op::Gelu(a),
        )
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary("softplus", a, softplus_scalar, Op::Softplus(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary("ln", a, f64::ln, Op::Ln(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.val(a).data().iter().sum();
        let needs = self.needs(a);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.val(a);
        assert!(!t.is_empty(), "mean of an empty tensor");
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let needs = self.needs(a);
        self.push("mean", Tensor::scalar(s), Op::Mean(a), needs)
    }

    /// Weighted sum of scalar nodes.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut s = 0.0;
        let mut needs = false;
        for &(v, c) in terms {
            let t = self.val(v);
            assert_eq!(t.len(), 1, "combine expects scalar terms");
            s += c * t.data()[0];
            needs |= self.needs(v);
        }
        self.push(
            "combine",
            Tensor::scalar(s),
            Op::Combine(terms.to_vec()),
            needs,
        )
    }

    /// Item plus position embedding lookup.
    ///
    /// Row `r` of the output is `table[items[r]] + pos[r % seq_len]`; rows
    /// whose item is the padding id 0 are all-zero and pass no gradient.
    pub fn embed(&mut self, table: Var, pos: Var, items: &[usize], seq_len: usize) -> Var {
        let (tt, tp) = (self.val(table), self.val(pos));
        let d = tt.cols();
        assert_eq!(tp.cols(), d, "embed: table widths differ");
        assert!(
            tp.rows() >= seq_len,
            "embed: position table shorter than sequence"
        );
        assert_eq!(
            items.len() % seq_len,
            0,
            "embed: items not a multiple of seq_len"
        );
        let pos_offset = tp.rows() - seq_len;
        let mut out = Tensor::zeros(&[items.len(), d]);
        for (r, &item) in items.iter().enumerate() {
            if item == 0 {
                continue;
            }
            assert!(item < tt.rows(), "embed: item id out of range");
            let p = tp.row(pos_offset + r % seq_len);
            for ((o, a), b) in out.row_mut(r).iter_mut().zip(tt.row(item)).zip(p) {
                *o = a + b;
            }
        }
        let needs = self.needs(table) || self.needs(pos);
        self.push(
            "embed",
            out,
            Op::Embed {
                table,
                pos,
                items: items.to_vec(),
                seq_len,
            },
            needs,
        )
    }

    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Var {
        let t = self.val(src);
        let d = t.cols();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![idx.len(), d], data).unwrap();
        let needs = self.needs(src);
        self.push(
            "gather_rows",
            out,
            Op::GatherRows {
                src,
                idx: idx.to_vec(),
            },
            needs,
        )
    }

    /// Repeats every row `times` times consecutively.
    pub fn repeat_rows(&mut self, src: Var, times: usize) -> Var {
        let t = self.val(src);
        let d = t.cols();
        let mut data = Vec::with_capacity(t.len() * times);
        for r in 0..t.rows() {
            for _ in 0..times {
                data.extend_from_slice(t.row(r));
            }
        }
        let out = Tensor::new(vec![t.rows() * times, d], data).unwrap();
        let needs = self.needs(src);
        self.push("repeat_rows", out, Op::RepeatRows { src, times }, needs)
    }

    /// Row `step` of every length-`seq_len` block: `[b*seq_len, d] -> [b, d]`.
    pub fn step_rows(&mut self, src: Var, seq_len: usize, step: usize) -> Var {
        let t = self.val(src);
        let d = t.cols();
        let b = t.rows() / seq_len;
        let mut data = Vec::with_capacity(b * d);
        for i in 0..b {
            data.extend_from_slice(t.row(i * seq_len + step));
        }
        let out = Tensor::new(vec![b, d], data).unwrap();
        let needs = self.needs(src);
        self.push("step_rows", out, Op::StepRows { src, seq_len, step }, needs)
    }

    /// Inverse of [`Graph::step_rows`]: stacks per-step `[b, d]` blocks into `[b*steps, d]`.
    pub fn interleave(&mut self, steps: &[Var]) -> Var {
        let n = steps.len();
        let b = self.val(steps[0]).rows();
        let d = self.val(steps[0]).cols();
        let mut out = Tensor::zeros(&[b * n, d]);
        for (t, &s) in steps.iter().enumerate() {
            let v = &self.nodes[s.0].value;
            for i in 0..b {
                out.row_mut(i * n + t).copy_from_slice(v.row(i));
            }
        }
        let needs = steps.iter().any(|&s| self.needs(s));
        self.push(
            "interleave",
            out,
            Op::Interleave {
                steps: steps.to_vec(),
            },
            needs,
        )
    }

    /// Per-row inner products: `[m, d] x [m, d] -> [m, 1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.val(a), self.val(b));
        assert_eq!(ta.shape(), tb.shape(), "row_dot: shapes differ");
        let data = (0..ta.rows())
            .map(|r| ta.row(r).iter().zip(tb.row(r)).map(|(x, y)| x * y).sum())
            .collect();
        let out = Tensor::new(vec![ta.rows(), 1], data).unwrap();
        let needs = self.needs(a) || self.needs(b);
        self.push("row_dot", out, Op::RowDot(a, b), needs)
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Var {
        let t = self.val(src);
        assert!(start + len <= t.cols(), "slice_cols out of range");
        let mut data = Vec::with_capacity(t.rows() * len);
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let out = Tensor::new(vec![t.rows(), len], data).unwrap();
        let needs = self.needs(src);
        self.push("slice_cols", out, Op::SliceCols { src, start }, needs)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.val(a), self.val(b));
        assert_eq!(ta.rows(), tb.rows(), "concat_cols: row counts differ");
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        for r in 0..ta.rows() {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(r));
        }
        let out = Tensor::new(vec![ta.rows(), ta.cols() + tb.cols()], data).unwrap();
        let needs = self.needs(a) || self.needs(b);
        self.push("concat_cols", out, Op::ConcatCols(a, b), needs)
    }

    /// Row-wise `mask * a + (1 - mask) * b` with a constant per-row mask.
    pub fn blend(&mut self, mask: Vec<f64>, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.val(a), self.val(b));
        assert_eq!(ta.shape(), tb.shape(), "blend: shapes differ");
        assert_eq!(mask.len(), ta.rows(), "blend: one mask value per row");
        let mut out = ta.clone();
        for (r, &m) in mask.iter().enumerate() {
            for (o, y) in out.row_mut(r).iter_mut().zip(tb.row(r)) {
                *o = m * *o + (1.0 - m) * y;
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push("blend", out, Op::Blend { mask, a, b }, needs)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (tx, tg, tb) = (self.val(x), self.val(gain), self.val(bias));
        let d = tx.cols();
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = Tensor::zeros(tx.shape());
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            let o = out.row_mut(r);
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                o[j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            needs,
        )
    }

    /// Multi-head scaled dot-product attention over `[batch*seq_len, d]` inputs.
    ///
    /// A query attends to key `j` only when `key_valid[j]` holds (and `j <= i`
    /// for causal attention). Queries with no admissible key produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Var {
        let (tq, tk, tv) = (self.val(q), self.val(k), self.val(v));
        let d = tq.cols();
        let (b, n, h) = (spec.batch, spec.seq_len, spec.heads);
        assert_eq!(tq.rows(), b * n, "attention: query rows");
        assert_eq!(spec.key_valid.len(), b * n, "attention: key mask length");
        assert_eq!(d % h, 0, "attention: width not divisible by heads");
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; b * h * n * n];
        let mut out = vec![0.0; b * n * d];
        for bi in 0..b {
            for hi in 0..h {
                let off = bi * n * d + hi * dh;
                let p = &mut probs[(bi * h + hi) * n * n..(bi * h + hi + 1) * n * n];
                // SAFETY: per-head blocks stay inside the [b*n, d] buffers.
                unsafe {
                    gemm_strided(
                        n,
                        dh,
                        n,
                        tq.data().as_ptr().add(off),
                        d as isize,
                        1,
                        tk.data().as_ptr().add(off),
                        1,
                        d as isize,
                        p.as_mut_ptr(),
                        n as isize,
                        false,
                    );
                }
                for i in 0..n {
                    let row = &mut p[i * n..(i + 1) * n];
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in row.iter_mut().enumerate() {
                        let ok = spec.key_valid[bi * n + j] && (!spec.causal || j <= i);
                        if ok {
                            *s *= scale;
                            max = max.max(*s);
                        } else {
                            *s = f64::NEG_INFINITY;
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        row.iter_mut().for_each(|s| *s = 0.0);
                        continue;
                    }
                    let mut z = 0.0;
                    for s in row.iter_mut() {
                        *s = if *s == f64::NEG_INFINITY {
                            0.0
                        } else {
                            (*s - max).exp()
                        };
                        z += *s;
                    }
                    row.iter_mut().for_each(|s| *s /= z);
                }
                unsafe {
                    gemm_strided(
                        n,
                        n,
                        dh,
                        p.as_ptr(),
                        n as isize,
                        1,
                        tv.data().as_ptr().add(off),
                        d as isize,
                        1,
                        out.as_mut_ptr().add(off),
                        d as isize,
                        false,
                    );
                }
            }
        }
        let value = Tensor::new(vec![b * n, d], out).unwrap();
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            "attention",
            value,
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
            needs,
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let lv = self.val(loss);
        if lv.len() != 1 {
            return Err(NumericsError::NotScalar(lv.shape().to_vec()));
        }
        if let Some(op) = self.fault {
            return Err(NumericsError::NonFinite(op));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));
        let mut out = Gradients::zeros_like(self.params);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Input => {
                    out.inputs.insert(idx, g);
                }
                Op::Param(id) => out.params[*id].add_assign(&g),
                Op::MatMul { a, b, a_t, b_t } => {
                    let (ta, tb) = (self.val(*a), self.val(*b));
                    let (m, n) = (g.rows(), g.cols());
                    let k = if *a_t { ta.rows() } else { ta.cols() };
                    if self.needs(*a) {
                        // dA = g * op(B)^T, laid out as A (transposed back if needed)
                        let mut da = vec![0.0; ta.len()];
                        if *a_t {
                            // A^T is m x k; dA (k x m) = op(B) * g^T
                            gemm(k, n, m, tb.data(), *b_t, g.data(), true, &mut da, false);
                        } else {
                            gemm(m, n, k, g.data(), false, tb.data(), !*b_t, &mut da, false);
                        }
                        accumulate(&mut grads, *a, ta.shape(), da);
                    }
                    if self.needs(*b) {
                        let mut db = vec![0.0; tb.len()];
                        if *b_t {
                            // dB (n x k) = g^T * op(A)
                            gemm(n, m, k, g.data(), true, ta.data(), *a_t, &mut db, false);
                        } else {
                            gemm(k, m, n, ta.data(), !*a_t, g.data(), false, &mut db, false);
                        }
                        accumulate(&mut grads, *b, tb.shape(), db);
                    }
                }
                Op::Add(a, b) => {
                    self.pass(&mut grads, *a, &g);
                    self.pass(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    self.pass(&mut grads, *a, &g);
                    if self.needs(*b) {
                        accumulate(
                            &mut grads,
                            *b,
                            g.shape(),
                            g.data().iter().map(|v| -v).collect(),
                        );
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.val(*a), self.val(*b));
                    if self.needs(*a) {
                        let d = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, *a, ta.shape(), d);
                    }
                    if self.needs(*b) {
                        let d = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, *b, tb.shape(), d);
                    }
                }
                Op::AddBias(a, bias) => {
                    self.pass(&mut grads, *a, &g);
                    if self.needs(*bias) {
                        let c = g.cols();
                        let mut db = vec![0.0; c];
                        for r in 0..g.rows() {
                            for (d, v) in db.iter_mut().zip(g.row(r)) {
                                *d += v;
                            }
                        }
                        let shape = self.val(*bias).shape().to_vec();
                        accumulate(&mut grads, *bias, &shape, db);
                    }
                }
                Op::Scale(a, c) => {
                    accumulate(
                        &mut grads,
                        *a,
                        g.shape(),
                        g.data().iter().map(|v| v * c).collect(),
                    );
                }
                Op::MulConst(a, c) => {
                    let d = g.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, *a, g.shape(), d);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let d = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(gv, s)| gv * s * (1.0 - s))
                        .collect();
                    accumulate(&mut grads, *a, g.shape(), d);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let d = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(gv, t)| gv * (1.0 - t * t))
                        .collect();
                    accumulate(&mut grads, *a, g.shape(), d);
                }
                Op::Gelu(a) => {
                    let x = self.val(*a);
                    let d = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(gv, &x)| {
                            let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                            let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                            gv * (0.5 * (1.0 + t) + 0.5 * x * dt)
                        })
                        .collect();
                    accumulate(&mut grads, *a, g.shape(), d);
                }
                Op::Softplus(a) => {
                    let x = self.val(*a);
                    let d = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(gv, &x)| gv * sigmoid_scalar(x))
                        .collect();
                    accumulate(&mut grads, *a, g.shape(), d);
                }
                Op::Ln(a) => {
                    let x = self.val(*a);
                    let d = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(gv, x)| gv / x)
                        .collect();
                    accumulate(&mut grads, *a, g.shape(), d);
                }
                Op::Square(a) => {
                    let x = self.val(*a);
                    let d = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(gv, x)| 2.0 * gv * x)
                        .collect();
                    accumulate(&mut grads, *a, g.shape(), d);
                }
                Op::Sum(a) => {
                    let x = self.val(*a);
                    accumulate(&mut grads, *a, x.shape(), vec![g.data()[0]; x.len()]);
                }
                Op::Mean(a) => {
                    let x = self.val(*a);
                    let v = g.data()[0] / x.len() as f64;
                    accumulate(&mut grads, *a, x.shape(), vec![v; x.len()]);
                }
                Op::Combine(terms) => {
                    for &(v, c) in terms {
                        if self.needs(v) {
                            accumulate(&mut grads, v, &[1], vec![c * g.data()[0]]);
                        }
                    }
                }
                Op::Embed {
                    table,
                    pos,
                    items,
                    seq_len,
                } => {
                    let d = g.cols();
                    if self.needs(*table) {
                        let tt = self.val(*table);
                        let mut dt = vec![0.0; tt.len()];
                        for (r, &item) in items.iter().enumerate() {
                            if item == 0 {
                                continue;
                            }
                            for (o, v) in dt[item * d..(item + 1) * d].iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        accumulate(&mut grads, *table, tt.shape(), dt);
                    }
                    if self.needs(*pos) {
                        let tp = self.val(*pos);
                        let off = tp.rows() - seq_len;
                        let mut dp = vec![0.0; tp.len()];
                        for (r, &item) in items.iter().enumerate() {
                            if item == 0 {
                                continue;
                            }
                            let p = off + r % seq_len;
                            for (o, v) in dp[p * d..(p + 1) * d].iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        accumulate(&mut grads, *pos, tp.shape(), dp);
                    }
                }
                Op::GatherRows { src, idx } => {
                    let t = self.val(*src);
                    let d = t.cols();
                    let mut ds = vec![0.0; t.len()];
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, v) in ds[i * d..(i + 1) * d].iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *src, t.shape(), ds);
                }
                Op::RepeatRows { src, times } => {
                    let t = self.val(*src);
                    let d = t.cols();
                    let mut ds = vec![0.0; t.len()];
                    for r in 0..g.rows() {
                        let i = r / times;
                        for (o, v) in ds[i * d..(i + 1) * d].iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *src, t.shape(), ds);
                }
                Op::StepRows { src, seq_len, step } => {
                    let t = self.val(*src);
                    let d = t.cols();
                    let mut ds = vec![0.0; t.len()];
                    for i in 0..g.rows() {
                        let r = i * seq_len + step;
                        ds[r * d..(r + 1) * d].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads, *src, t.shape(), ds);
                }
                Op::Interleave { steps } => {
                    let n = steps.len();
                    let d = g.cols();
                    let b = g.rows() / n;
                    for (t, &s) in steps.iter().enumerate() {
                        if !self.needs(s) {
                            continue;
                        }
                        let mut ds = Vec::with_capacity(b * d);
                        for i in 0..b {
                            ds.extend_from_slice(g.row(i * n + t));
                        }
                        accumulate(&mut grads, s, &[b, d], ds);
                    }
                }
                Op::RowDot(a, b) => {
                    let (ta, tb) = (self.val(*a), self.val(*b));
                    let d = ta.cols();
                    if self.needs(*a) {
                        let mut da = vec![0.0; ta.len()];
                        for r in 0..ta.rows() {
                            let gv = g.data()[r];
                            for (o, y) in da[r * d..(r + 1) * d].iter_mut().zip(tb.row(r)) {
                                *o = gv * y;
                            }
                        }
                        accumulate(&mut grads, *a, ta.shape(), da);
                    }
                    if self.needs(*b) {
                        let mut db = vec![0.0; tb.len()];
                        for r in 0..tb.rows() {
                            let gv = g.data()[r];
                            for (o, x) in db[r * d..(r + 1) * d].iter_mut().zip(ta.row(r)) {
                                *o = gv * x;
                            }
                        }
                        accumulate(&mut grads, *b, tb.shape(), db);
                    }
                }
                Op::SliceCols { src, start } => {
                    let t = self.val(*src);
                    let (c, len) = (t.cols(), g.cols());
                    let mut ds = vec![0.0; t.len()];
                    for r in 0..g.rows() {
                        ds[r * c + start..r * c + start + len].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *src, t.shape(), ds);
                }
                Op::ConcatCols(a, b) => {
                    let (ta, tb) = (self.val(*a), self.val(*b));
                    let ca = ta.cols();
                    if self.needs(*a) {
                        let mut da = Vec::with_capacity(ta.len());
                        for r in 0..g.rows() {
                            da.extend_from_slice(&g.row(r)[..ca]);
                        }
                        accumulate(&mut grads, *a, ta.shape(), da);
                    }
                    if self.needs(*b) {
                        let mut db = Vec::with_capacity(tb.len());
                        for r in 0..g.rows() {
                            db.extend_from_slice(&g.row(r)[ca..]);
                        }
                        accumulate(&mut grads, *b, tb.shape(), db);
                    }
                }
                Op::Blend { mask, a, b } => {
                    let d = g.cols();
                    if self.needs(*a) {
                        let mut da = g.data().to_vec();
                        for (r, m) in mask.iter().enumerate() {
                            da[r * d..(r + 1) * d].iter_mut().for_each(|v| *v *= m);
                        }
                        accumulate(&mut grads, *a, g.shape(), da);
                    }
                    if self.needs(*b) {
                        let mut db = g.data().to_vec();
                        for (r, m) in mask.iter().enumerate() {
                            db[r * d..(r + 1) * d]
                                .iter_mut()
                                .for_each(|v| *v *= 1.0 - m);
                        }
                        accumulate(&mut grads, *b, g.shape(), db);
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let tg = self.val(*gain);
                    let d = g.cols();
                    let rows = g.rows();
                    if self.needs(*gain) || self.needs(*bias) {
                        let mut dg = vec![0.0; d];
                        let mut db = vec![0.0; d];
                        for r in 0..rows {
                            for j in 0..d {
                                let gv = g.data()[r * d + j];
                                dg[j] += gv * xhat[r * d + j];
                                db[j] += gv;
                            }
                        }
                        accumulate(&mut grads, *gain, tg.shape(), dg);
                        let bs = self.val(*bias).shape().to_vec();
                        accumulate(&mut grads, *bias, &bs, db);
                    }
                    if self.needs(*x) {
                        let mut dx = vec![0.0; rows * d];
                        let nd = d as f64;
                        for r in 0..rows {
                            let mut sum_dh = 0.0;
                            let mut sum_dh_h = 0.0;
                            for j in 0..d {
                                let dh = g.data()[r * d + j] * tg.data()[j];
                                sum_dh += dh;
                                sum_dh_h += dh * xhat[r * d + j];
                            }
                            for j in 0..d {
                                let dh = g.data()[r * d + j] * tg.data()[j];
                                dx[r * d + j] = inv_std[r] / nd
                                    * (nd * dh - sum_dh - xhat[r * d + j] * sum_dh_h);
                            }
                        }
                        let xs = self.val(*x).shape().to_vec();
                        accumulate(&mut grads, *x, &xs, dx);
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    spec,
                    probs,
                } => {
                    let (tq, tk, tv) = (self.val(*q), self.val(*k), self.val(*v));
                    let d = tq.cols();
                    let (b, n, h) = (spec.batch, spec.seq_len, spec.heads);
                    let dh = d / h;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = vec![0.0; tq.len()];
                    let mut dk = vec![0.0; tk.len()];
                    let mut dv = vec![0.0; tv.len()];
                    let mut dp = vec![0.0; n * n];
                    for bi in 0..b {
                        for hi in 0..h {
                            let off = bi * n * d + hi * dh;
                            let p = &probs[(bi * h + hi) * n * n..(bi * h + hi + 1) * n * n];
                            // SAFETY: same block geometry as the forward pass.
                            unsafe {
                                // dP = dO V^T
                                gemm_strided(
                                    n,
                                    dh,
                                    n,
                                    g.data().as_ptr().add(off),
                                    d as isize,
                                    1,
                                    tv.data().as_ptr().add(off),
                                    1,
                                    d as isize,
                                    dp.as_mut_ptr(),
                                    n as isize,
                                    false,
                                );
                                // dV = P^T dO
                                gemm_strided(
                                    n,
                                    n,
                                    dh,
                                    p.as_ptr(),
                                    1,
                                    n as isize,
                                    g.data().as_ptr().add(off),
                                    d as isize,
                                    1,
                                    dv.as_mut_ptr().add(off),
                                    d as isize,
                                    false,
                                );
                            }
                            for i in 0..n {
                                let pr = &p[i * n..(i + 1) * n];
                                let dr = &mut dp[i * n..(i + 1) * n];
                                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                                for (x, &pv) in dr.iter_mut().zip(pr) {
                                    *x = pv * (*x - dot) * scale;
                                }
                            }
                            unsafe {
                                // dQ = dS K
                                gemm_strided(
                                    n,
                                    n,
                                    dh,
                                    dp.as_ptr(),
                                    n as isize,
                                    1,
                                    tk.data().as_ptr().add(off),
                                    d as isize,
                                    1,
                                    dq.as_mut_ptr().add(off),
                                    d as isize,
                                    false,
                                );
                                // dK = dS^T Q
                                gemm_strided(
                                    n,
                                    n,
                                    dh,
                                    dp.as_ptr(),
                                    1,
                                    n as isize,
                                    tq.data().as_ptr().add(off),
                                    d as isize,
                                    1,
                                    dk.as_mut_ptr().add(off),
                                    d as isize,
                                    false,
                                );
                            }
                        }
                    }
                    let shape = tq.shape().to_vec();
                    if self.needs(*q) {
                        accumulate(&mut grads, *q, &shape, dq);
                    }
                    if self.needs(*k) {
                        accumulate(&mut grads, *k, &shape, dk);
                    }
                    if self.needs(*v) {
                        accumulate(&mut grads, *v, &shape, dv);
                    }
                }
            }
        }
        if out.params.iter().any(|t| !t.is_finite()) {
            return Err(NumericsError::NonFinite("backward"));
        }
        Ok(out)
    }

    fn pass(&self, grads: &mut [Option<Tensor>], v: Var, g: &Tensor) {
        if self.needs(v) {
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(g),
                slot @ None => *slot = Some(g.clone()),
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], data: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(&data) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(Tensor::new(shape.to_vec(), data).expect("gradient shape")),
    }
}
