//! The base sequential recommender: item and position embeddings, sequence
//! encoders, full-catalog scoring and the pairwise ranking loss.

mod encoder;

pub use encoder::{EncoderKind, EncoderSpec, SequenceEncoder};

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{SequenceExample, PADDING};
use crate::numerics::{
    softplus_scalar, Graph, NumericsError, ParamId, ParamStore, RngStream, Tensor, Var,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("item id {id} is outside the catalog (1..={n_items})")]
    ItemOutOfRange { id: usize, n_items: usize },
    #[error("sequence of length {len} does not fit the position table of {n_max} rows")]
    SequenceTooLong { len: usize, n_max: usize },
    #[error("user {user} has interacted with every item; no negative can be sampled")]
    NoNegatives { user: usize },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Handles to the item matrix `M` (`(|I|+1) x d`, row 0 = padding) and the
/// position table `P` (`n_max x d`) inside a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub items: ParamId,
    pub positions: ParamId,
    pub n_items: usize,
    pub n_max: usize,
    pub d: usize,
}

impl EmbeddingTable {
    pub fn new(
        store: &mut ParamStore,
        n_items: usize,
        n_max: usize,
        d: usize,
        rng: &mut RngStream,
    ) -> Self {
        let mut m = Tensor::new(vec![n_items + 1, d], rng.normals((n_items + 1) * d))
            .unwrap()
            .map(|x| 0.1 * x);
        m.row_mut(PADDING).fill(0.0);
        let p = Tensor::new(vec![n_max, d], rng.normals(n_max * d))
            .unwrap()
            .map(|x| 0.1 * x);
        let items = store.add("embedding.items", m);
        let positions = store.add("embedding.positions", p);
        Self {
            items,
            positions,
            n_items,
            n_max,
            d,
        }
    }

    pub fn check_items(&self, items: &[usize]) -> Result<(), ModelError> {
        if items.len() > self.n_max {
            return Err(ModelError::SequenceTooLong {
                len: items.len(),
                n_max: self.n_max,
            });
        }
        match items.iter().find(|&&i| i > self.n_items) {
            Some(&id) => Err(ModelError::ItemOutOfRange {
                id,
                n_items: self.n_items,
            }),
            None => Ok(()),
        }
    }

    /// `e^u` for one sequence: row `k` is `M[items[k]] + P[k]`, padding rows are zero.
    ///
    /// Positions are aligned to the right end of the table, so a shorter
    /// sequence uses the last `items.len()` position rows.
    pub fn embed_sequence(
        &self,
        store: &ParamStore,
        items: &[usize],
    ) -> Result<Tensor, ModelError> {
        self.check_items(items)?;
        let mut g = Graph::new(store);
        let (m, p) = (g.param(self.items), g.param(self.positions));
        let e = g.embed(m, p, items, items.len());
        Ok(g.value(e).clone())
    }

    pub fn embed(&self, g: &mut Graph<'_>, batch: &SeqBatch) -> Var {
        let (m, p) = (g.param(self.items), g.param(self.positions));
        g.embed(m, p, &batch.items, batch.seq_len)
    }
}

/// A batch of left-padded sequences, trimmed to the longest real history.
///
/// Dropping leading columns that are padding in every row leaves the encoder
/// outputs unchanged, since padding keys are masked and padding steps skipped.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqBatch {
    pub batch: usize,
    pub seq_len: usize,
    /// Row-major `[batch, seq_len]` item ids.
    pub items: Vec<usize>,
}

impl SeqBatch {
    pub fn from_rows<R: AsRef<[usize]>>(rows: &[R]) -> Self {
        let width = rows.iter().map(|r| r.as_ref().len()).max().unwrap_or(0);
        let real = rows
            .iter()
            .map(|r| {
                let r = r.as_ref();
                r.len() - r.iter().position(|&i| i != PADDING).unwrap_or(r.len())
            })
            .max()
            .unwrap_or(0)
            .max(1)
            .min(width.max(1));
        let mut items = Vec::with_capacity(rows.len() * real);
        for r in rows {
            let r = r.as_ref();
            if r.len() >= real {
                items.extend_from_slice(&r[r.len() - real..]);
            } else {
                items.extend(std::iter::repeat(PADDING).take(real - r.len()));
                items.extend_from_slice(r);
            }
        }
        Self {
            batch: rows.len(),
            seq_len: real,
            items,
        }
    }

    pub fn from_examples(examples: &[&SequenceExample]) -> Self {
        let rows: Vec<&[usize]> = examples.iter().map(|e| e.items.as_slice()).collect();
        Self::from_rows(&rows)
    }

    pub fn key_valid(&self) -> Vec<bool> {
        self.items.iter().map(|&i| i != PADDING).collect()
    }

    /// 1.0 for rows whose item at step `t` is real.
    pub fn step_mask(&self, t: usize) -> Vec<f64> {
        (0..self.batch)
            .map(|b| {
                if self.items[b * self.seq_len + t] != PADDING {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Final hidden state `h_n` of one sequence.
pub fn encode_sequence(
    store: &ParamStore,
    tables: &EmbeddingTable,
    encoder: &SequenceEncoder,
    items: &[usize],
) -> Result<Tensor, ModelError> {
    tables.check_items(items)?;
    let batch = SeqBatch::from_rows(&[items]);
    let mut g = Graph::new(store);
    let e = tables.embed(&mut g, &batch);
    let h = encoder.encode(&mut g, e, &batch);
    let out = g.value(h).clone();
    Ok(Tensor::vector(out.into_data()))
}

/// Scores over the catalog; index 0 (padding) holds `-inf`.
#[derive(Clone, Debug, PartialEq)]
pub struct Scores(pub Vec<f64>);

impl Scores {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Highest-scoring real item; the lowest id wins ties.
    pub fn argmax(&self) -> Option<usize> {
        (1..self.0.len()).fold(None, |best, i| match best {
            Some(b) if self.0[b] >= self.0[i] => Some(b),
            _ => Some(i),
        })
    }
}

/// `score[i] = <h, M[i]>` for every item.
pub fn score_items(h: &[f64], item_matrix: &Tensor) -> Scores {
    let mut out: Vec<f64> = (0..item_matrix.rows())
        .map(|i| h.iter().zip(item_matrix.row(i)).map(|(a, b)| a * b).sum())
        .collect();
    if let Some(p) = out.get_mut(PADDING) {
        *p = f64::NEG_INFINITY;
    }
    Scores(out)
}

/// Scores for a batch of representations `[b, d]` against `M` (`[|I|+1, d]`).
pub fn score_batch(h: &Tensor, item_matrix: &Tensor) -> Vec<Scores> {
    let (b, d, n) = (h.rows(), h.cols(), item_matrix.rows());
    let mut out = vec![0.0; b * n];
    crate::numerics::gemm(
        b,
        d,
        n,
        h.data(),
        false,
        item_matrix.data(),
        true,
        &mut out,
        false,
    );
    out.chunks(n)
        .map(|row| {
            let mut s = row.to_vec();
            s[PADDING] = f64::NEG_INFINITY;
            Scores(s)
        })
        .collect()
}

/// `-ln sigmoid(pos - neg)`, evaluated as a softplus.
pub fn bpr_loss(score_pos: f64, score_neg: f64) -> f64 {
    softplus_scalar(score_neg - score_pos)
}

/// Mean BPR loss of representation rows `h` (`[b, d]`) with targets `pos_rows`
/// (`[b, d]`) and `k` negatives per row in `neg_rows` (`[b * k, d]`, grouped by row).
pub fn bpr_graph(g: &mut Graph<'_>, h: Var, pos_rows: Var, neg_rows: Var, k: usize) -> Var {
    let sp = g.row_dot(h, pos_rows);
    let (sp, h) = if k == 1 {
        (sp, h)
    } else {
        (g.repeat_rows(sp, k), g.repeat_rows(h, k))
    };
    let sn = g.row_dot(h, neg_rows);
    let diff = g.sub(sn, sp);
    let l = g.softplus(diff);
    g.mean(l)
}

/// Uniform negatives among the items a user has not interacted with.
#[derive(Clone, Debug)]
pub struct NegativeSampler {
    n_items: usize,
    seen: Vec<HashSet<usize>>,
}

impl NegativeSampler {
    pub fn new(n_items: usize, seen: Vec<HashSet<usize>>) -> Self {
        Self { n_items, seen }
    }

    pub fn sample(&self, user: usize, rng: &mut RngStream) -> Result<usize, ModelError> {
        let seen = self.seen.get(user);
        let n_seen = seen.map_or(0, |s| s.len());
        if n_seen >= self.n_items {
            return Err(ModelError::NoNegatives { user });
        }
        loop {
            let j = rng.below(1, self.n_items + 1);
            if !seen.is_some_and(|s| s.contains(&j)) {
                return Ok(j);
            }
        }
    }

    /// `k` negatives per user, grouped by user.
    pub fn sample_many(
        &self,
        users: &[usize],
        k: usize,
        rng: &mut RngStream,
    ) -> Result<Vec<usize>, ModelError> {
        let mut out = Vec::with_capacity(users.len() * k);
        for &u in users {
            for _ in 0..k {
                out.push(self.sample(u, rng)?);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn setup(
        kind: EncoderKind,
        n_items: usize,
        n_max: usize,
        d: usize,
        seed: u64,
    ) -> (ParamStore, EmbeddingTable, SequenceEncoder) {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(seed);
        let tables = EmbeddingTable::new(&mut store, n_items, n_max, d, &mut rng);
        let enc =
            SequenceEncoder::new(&mut store, "enc", &EncoderSpec::new(kind, d), &mut rng).unwrap();
        (store, tables, enc)
    }

    #[test]
    fn all_padding_embeds_to_zero() {
        let (store, tables, _) = setup(EncoderKind::RecurrentGated, 5, 4, 3, 1);
        let e = tables.embed_sequence(&store, &[0, 0, 0, 0]).unwrap();
        assert!(e.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_item_row_is_item_plus_position() {
        let (store, tables, _) = setup(EncoderKind::RecurrentGated, 5, 4, 3, 2);
        let e = tables.embed_sequence(&store, &[0, 0, 0, 3]).unwrap();
        let (m, p) = (store.get(tables.items), store.get(tables.positions));
        for r in 0..3 {
            assert!(e.row(r).iter().all(|&x| x == 0.0));
        }
        for c in 0..3 {
            assert_eq!(e.row(3)[c], m.row(3)[c] + p.row(3)[c]);
        }
    }

    #[test]
    fn hand_sized_embedding() {
        let mut store = ParamStore::new();
        let items = store.add(
            "m",
            Tensor::matrix(3, 2, vec![0.0, 0.0, 1.0, 2.0, 3.0, -1.0]).unwrap(),
        );
        let positions = store.add(
            "p",
            Tensor::matrix(3, 2, vec![10.0, 20.0, 30.0, 40.0, 50.0, 60.0]).unwrap(),
        );
        let tables = EmbeddingTable {
            items,
            positions,
            n_items: 2,
            n_max: 3,
            d: 2,
        };
        let e = tables.embed_sequence(&store, &[0, 2, 1]).unwrap();
        assert_eq!(e.data(), &[0.0, 0.0, 33.0, 39.0, 51.0, 62.0]);
        assert!(matches!(
            tables.embed_sequence(&store, &[0, 3, 1]),
            Err(ModelError::ItemOutOfRange { id: 3, .. })
        ));
    }

    #[test]
    fn left_padding_does_not_change_h_n() {
        for kind in EncoderKind::ALL {
            let (store, tables, enc) = setup(kind, 30, 20, 16, 3);
            let short = encode_sequence(&store, &tables, &enc, &[0, 0, 4, 17, 9]).unwrap();
            let mut long = vec![0; 15];
            long.extend([4, 17, 9]);
            let long = encode_sequence(&store, &tables, &enc, &long).unwrap();
            let max = short
                .data()
                .iter()
                .zip(long.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max < 1e-10, "{kind}: {max}");
            let again = encode_sequence(&store, &tables, &enc, &[0, 0, 4, 17, 9]).unwrap();
            assert_eq!(short, again);
        }
    }

    #[test]
    fn batch_trimming_matches_single_rows() {
        for kind in EncoderKind::ALL {
            let (store, tables, enc) = setup(kind, 30, 8, 8, 4);
            let rows = vec![
                vec![0, 0, 0, 0, 0, 3, 5, 7],
                vec![0, 0, 0, 0, 0, 0, 0, 11],
                vec![0, 0, 0, 0, 2, 2, 9, 1],
            ];
            let batch = SeqBatch::from_rows(&rows);
            assert_eq!(batch.seq_len, 4);
            let mut g = Graph::new(&store);
            let e = tables.embed(&mut g, &batch);
            let h = enc.encode(&mut g, e, &batch);
            for (b, row) in rows.iter().enumerate() {
                let single = encode_sequence(&store, &tables, &enc, row).unwrap();
                for (x, y) in g.value(h).row(b).iter().zip(single.data()) {
                    assert!((x - y).abs() < 1e-12, "{kind}");
                }
            }
        }
    }

    #[test]
    fn causal_attention_ignores_later_positions() {
        let (store, tables, enc) = setup(EncoderKind::SelfAttentionCausal, 10, 5, 8, 5);
        let items = [1, 2, 3, 4, 5];
        let batch = SeqBatch::from_rows(&[items]);
        let mut g = Graph::new(&store);
        let e = tables.embed(&mut g, &batch);
        let e_in = g.input(g.value(e).clone());
        let h = enc.hidden_states(&mut g, e_in, &batch);
        // loss on h_k for k = 2 only
        let h2 = g.step_rows(h, 5, 2);
        let loss = g.sum(h2);
        let grads = g.backward(loss).unwrap();
        let ge = grads.input(e_in).unwrap();
        for r in 3..5 {
            assert!(ge.row(r).iter().all(|&x| x == 0.0), "row {r}");
        }
        assert!(ge.row(2).iter().any(|&x| x != 0.0));
    }

    #[test]
    fn bidirectional_attention_sees_later_positions() {
        let (store, tables, enc) = setup(EncoderKind::SelfAttentionBidirectional, 10, 5, 8, 5);
        let batch = SeqBatch::from_rows(&[[1, 2, 3, 4, 5]]);
        let mut g = Graph::new(&store);
        let e = tables.embed(&mut g, &batch);
        let e_in = g.input(g.value(e).clone());
        let h = enc.hidden_states(&mut g, e_in, &batch);
        let h0 = g.step_rows(h, 5, 0);
        let loss = g.sum(h0);
        let grads = g.backward(loss).unwrap();
        assert!(grads.input(e_in).unwrap().row(4).iter().any(|&x| x != 0.0));
    }

    #[test]
    fn hidden_states_keep_shape() {
        for kind in EncoderKind::ALL {
            let (store, tables, enc) = setup(kind, 10, 6, 4, 6);
            let batch = SeqBatch::from_rows(&[[1, 2, 3, 4, 5, 6], [0, 0, 7, 8, 9, 1]]);
            let mut g = Graph::new(&store);
            let e = tables.embed(&mut g, &batch);
            let h = enc.hidden_states(&mut g, e, &batch);
            assert_eq!(g.value(h).shape(), &[12, 4]);
        }
    }

    #[test]
    fn scoring_geometry() {
        let m = Tensor::matrix(
            4,
            3,
            vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        assert_eq!(score_items(m.row(2), &m).argmax(), Some(2));
        let zero = score_items(&[0.0, 0.0, 0.0], &m);
        assert_eq!(zero.values()[0], f64::NEG_INFINITY);
        assert!(zero.values()[1..].iter().all(|&s| s == 0.0));
        // d = 2, three items: h = (1, -2)
        let m = Tensor::matrix(4, 2, vec![0.0, 0.0, 0.5, 1.0, -1.0, 3.0, 2.0, 0.25]).unwrap();
        let s = score_items(&[1.0, -2.0], &m);
        assert_eq!(&s.values()[1..], &[-1.5, -7.0, 1.5]);
        let batched = score_batch(&Tensor::matrix(1, 2, vec![1.0, -2.0]).unwrap(), &m);
        assert_eq!(batched[0], s);
    }

    #[test]
    fn bpr_values() {
        assert_relative_eq!(bpr_loss(0.3, 0.3), std::f64::consts::LN_2, epsilon = 1e-15);
        // ln(1 + e^-10)
        assert_relative_eq!(
            bpr_loss(10.0, 0.0),
            4.539_889_921_686_465e-5,
            max_relative = 1e-12
        );
        assert!(bpr_loss(800.0, 0.0) >= 0.0 && bpr_loss(800.0, 0.0) < 1e-300);
    }

    proptest! {
        #[test]
        fn bpr_decreasing_in_margin(a in -50.0f64..50.0, delta in 1e-3f64..10.0) {
            prop_assert!(bpr_loss(a + delta, 0.0) < bpr_loss(a, 0.0));
            prop_assert!(bpr_loss(a, 0.0) >= 0.0);
        }
    }

    #[test]
    fn negatives_avoid_seen_items() {
        let seen = vec![(1..=8).collect::<HashSet<usize>>(), HashSet::new()];
        let sampler = NegativeSampler::new(10, seen);
        let mut rng = RngStream::new(3);
        for _ in 0..200 {
            let j = sampler.sample(0, &mut rng).unwrap();
            assert!(j == 9 || j == 10);
        }
        let full = NegativeSampler::new(2, vec![[1, 2].into_iter().collect()]);
        assert!(matches!(
            full.sample(0, &mut rng),
            Err(ModelError::NoNegatives { user: 0 })
        ));
    }

    #[test]
    fn graph_bpr_matches_scalar_form() {
        let mut store = ParamStore::new();
        let h = store.add(
            "h",
            Tensor::matrix(2, 2, vec![1.0, 0.5, -1.0, 2.0]).unwrap(),
        );
        let p = store.add(
            "p",
            Tensor::matrix(2, 2, vec![0.2, 0.1, 0.3, -0.4]).unwrap(),
        );
        let n = store.add(
            "n",
            Tensor::matrix(4, 2, vec![1.0, 1.0, 0.0, -1.0, 0.5, 0.5, 2.0, 0.0]).unwrap(),
        );
        let mut g = Graph::new(&store);
        let (hv, pv, nv) = (g.param(h), g.param(p), g.param(n));
        let l = bpr_graph(&mut g, hv, pv, nv, 2);
        let dot = |a: &[f64], b: &[f64]| a[0] * b[0] + a[1] * b[1];
        let (ht, pt, nt) = (store.get(h), store.get(p), store.get(n));
        let mut expect = 0.0;
        for b in 0..2 {
            for j in 0..2 {
                expect += bpr_loss(dot(ht.row(b), pt.row(b)), dot(ht.row(b), nt.row(2 * b + j)));
            }
        }
        assert_relative_eq!(g.value(l).item().unwrap(), expect / 4.0, epsilon = 1e-15);
    }
}
