use super::*;
use crate::numerics::gradcheck::{check_gradients, GradCheckOptions};
use approx::assert_relative_eq;
use proptest::prelude::*;

fn example(user: usize, items: &[usize], target: usize, n_max: usize) -> SequenceExample {
    SequenceExample::from_context(user, items, target, n_max)
}

fn toy(kind: EncoderKind, stochastic: bool, fusion: Fusion) -> Network {
    let mut cfg = NetworkConfig::new(20, 5, 8, kind);
    cfg.stochastic = stochastic;
    cfg.fusion = fusion;
    Network::new(cfg, 7).unwrap()
}

#[test]
fn reductions_of_the_weighted_sum() {
    let parts = TermValues {
        h_t: 0.7,
        h_s: 0.9,
        h_ts: 0.6,
    };
    let zero = LossWeights::new(0.0, 0.0, 0.0).unwrap();
    assert_eq!(total_loss(parts, 4.0, &zero, TermMask::ALL).total, 0.7);
    let tied = LossWeights::new(0.3, 0.01, 0.3).unwrap();
    assert_eq!(total_loss(parts, 4.0, &tied, TermMask::ALL).term_b, 0.0);
    let w = LossWeights::new(0.1, 0.01, 0.5).unwrap();
    let b = total_loss(parts, 4.0, &w, TermMask::ALL);
    assert_relative_eq!(b.term_a, 0.35, epsilon = 1e-15);
    assert_relative_eq!(b.term_b, 0.36, epsilon = 1e-15);
    assert_relative_eq!(b.term_c, 0.30, epsilon = 1e-15);
    assert_relative_eq!(b.term_d, 0.04, epsilon = 1e-15);
    assert_relative_eq!(b.total, 0.33, epsilon = 1e-15);
    let masked = total_loss(parts, 4.0, &w, TermMask::ALL.without('a'));
    assert_eq!(masked.term_a, 0.0);
}

proptest! {
    #[test]
    fn total_is_signed_sum(h_t in 0.0f64..5.0, h_s in 0.0f64..5.0, h_ts in 0.0f64..5.0, comp in 0.0f64..50.0,
                           alpha in 0.0f64..1.0, beta in 0.0f64..1.0, gamma in 0.0f64..1.0, bits in 0u8..16) {
        let w = LossWeights { alpha, beta, gamma };
        let mask = TermMask { a: bits & 1 != 0, b: bits & 2 != 0, c: bits & 4 != 0, d: bits & 8 != 0 };
        let b = total_loss(TermValues { h_t, h_s, h_ts }, comp, &w, mask);
        prop_assert_eq!(b.total, b.term_a - b.term_b + b.term_c + b.term_d);
    }
}

#[test]
fn weight_validation() {
    assert!(LossWeights::new(0.1, 0.01, 1.5).is_err());
    assert!(LossWeights::new(-0.1, 0.01, 0.5).is_err());
    assert!(LossWeights::new(0.6, 0.0, 0.5).unwrap().warnings().len() == 1);
    assert!(LossWeights::default().warnings().is_empty());
    assert_eq!(
        "a,c".parse::<TermMask>().unwrap(),
        TermMask {
            a: true,
            b: false,
            c: true,
            d: false
        }
    );
    assert_eq!(TermMask::ALL.to_string(), "a,b,c,d");
}

#[test]
fn compression_values() {
    let stoch = |mu: Vec<f64>, sigma: Vec<f64>| StochasticEmbedding {
        t: Tensor::vector(mu.clone()),
        mu: Tensor::vector(mu),
        sigma: Tensor::vector(sigma),
        deterministic: false,
    };
    assert_eq!(
        compression_term(&stoch(vec![0.0, 0.0], vec![1.0, 1.0])).unwrap(),
        0.0
    );
    assert_relative_eq!(
        compression_term(&stoch(vec![1.0, 1.0], vec![1.0, 1.0])).unwrap(),
        1.0,
        epsilon = 1e-15
    );
    // 1/2 (4 - ln 4 - 1)
    assert_relative_eq!(
        compression_term(&stoch(vec![0.0], vec![2.0])).unwrap(),
        0.806_852_819_440_054_7,
        epsilon = 1e-14
    );
    assert!(matches!(
        compression_term(&stoch(vec![0.0, 1.0], vec![1.0, 0.0])),
        Err(ObjectiveError::ZeroSigma)
    ));
    let det = StochasticEmbedding::deterministic(Tensor::vector(vec![3.0, 4.0]));
    assert_eq!(compression_term(&det).unwrap(), 12.5);
}

#[test]
fn compression_graph_is_twice_the_kl() {
    let net = toy(EncoderKind::SelfAttentionCausal, true, Fusion::Sum);
    let exs = [example(0, &[1, 2, 3], 4, 5), example(1, &[7], 9, 5)];
    let refs: Vec<&SequenceExample> = exs.iter().collect();
    let batch = SeqBatch::from_examples(&refs);
    let mut g = Graph::new(&net.params);
    let e = net.embed(&mut g, &batch);
    let adj = net.adjustment_graph(&mut g, e, &batch, None);
    let c = compression_graph(&mut g, adj, 2);
    let mut expect = 0.0;
    for ex in &exs {
        let mut emb = net
            .adjustment_forward(&ex.items, Some(&mut RngStream::new(0)))
            .unwrap();
        emb.deterministic = false;
        expect += compression_term(&emb).unwrap();
    }
    assert_relative_eq!(g.value(c).item().unwrap(), expect, max_relative = 1e-12);
}

fn dual(t: Vec<f64>, s: Vec<f64>) -> DualRepresentation {
    DualRepresentation {
        adjustment: StochasticEmbedding::deterministic(Tensor::vector(t)),
        confounder: Tensor::vector(s),
    }
}

#[test]
fn conditional_bpr_cases() {
    let m = Tensor::matrix(4, 2, vec![0.0, 0.0, 1.0, 0.5, -0.5, 2.0, 0.25, -1.0]).unwrap();
    let r = dual(vec![0.3, -0.7], vec![0.0, 0.0]);
    let ts = conditional_bpr(1, &[2, 3], &r, &m, Condition::Ts).unwrap();
    assert_eq!(
        ts,
        conditional_bpr(1, &[2, 3], &r, &m, Condition::T).unwrap()
    );

    let same = dual(vec![0.3, -0.7], vec![0.3, -0.7]);
    let doubled = conditional_bpr(1, &[2], &same, &m, Condition::Ts).unwrap();
    let single = conditional_bpr(1, &[2], &same, &m, Condition::T).unwrap();
    assert_ne!(doubled, single);

    // t = (1, 2): pos = <t, (1, .5)> = 2, neg = <t, (-.5, 2)> = 3.5 -> -ln sigma(-1.5)
    let r = dual(vec![1.0, 2.0], vec![0.0, 1.0]);
    let hand = (1.0 + 1.5f64.exp()).ln();
    assert_relative_eq!(
        conditional_bpr(1, &[2], &r, &m, Condition::T).unwrap(),
        hand,
        epsilon = 1e-14
    );
    // s = (0, 1): pos 0.5, neg 2 -> ln(1 + e^1.5) as well
    assert_relative_eq!(
        conditional_bpr(1, &[2], &r, &m, Condition::S).unwrap(),
        hand,
        epsilon = 1e-14
    );
    assert!(matches!(
        conditional_bpr(1, &[], &r, &m, Condition::T),
        Err(ObjectiveError::NoNegatives)
    ));
}

#[test]
fn deterministic_t_equals_mu() {
    let net = toy(EncoderKind::RecurrentGated, false, Fusion::Sum);
    let emb = net
        .adjustment_forward(&[0, 0, 3, 4, 5], Some(&mut RngStream::new(1)))
        .unwrap();
    assert_eq!(emb.t, emb.mu);
    assert!(emb.deterministic);
}

#[test]
fn stochastic_t_reproducible_and_spread() {
    let net = toy(EncoderKind::SelfAttentionCausal, true, Fusion::Sum);
    let items = [0, 1, 2, 3, 4];
    let a = net
        .adjustment_forward(&items, Some(&mut RngStream::new(5)))
        .unwrap();
    let b = net
        .adjustment_forward(&items, Some(&mut RngStream::new(5)))
        .unwrap();
    assert_eq!(a, b);
    assert!(
        a.sigma.data().iter().all(|&s| (s - 0.1).abs() < 0.02),
        "{:?}",
        a.sigma
    );
    let n = 100_000;
    let mut rng = RngStream::new(9);
    let d = a.mu.len();
    let mut sq = vec![0.0; d];
    for _ in 0..n {
        let t = crate::numerics::reparameterize(&a.mu, &a.sigma, &mut rng).unwrap();
        for j in 0..d {
            let z = t.data()[j] - a.mu.data()[j];
            sq[j] += z * z;
        }
    }
    for j in 0..d {
        let sd = (sq[j] / n as f64).sqrt();
        // standard error of a sample sd is about sigma / sqrt(2n)
        let tol = 4.0 * a.sigma.data()[j] / (2.0 * n as f64).sqrt();
        assert!((sd - a.sigma.data()[j]).abs() < tol, "dim {j}: {sd}");
    }
}

#[test]
fn confounder_is_separate() {
    let net = toy(EncoderKind::RecurrentGated, false, Fusion::Sum);
    let items = [0, 0, 5, 6, 7];
    let s = net.confounder_forward(&items).unwrap();
    let mut perturbed = net.clone();
    for id in perturbed.adjustment.param_ids().to_vec() {
        for v in perturbed.params.get_mut(id).data_mut() {
            *v += 0.5;
        }
    }
    assert_eq!(perturbed.confounder_forward(&items).unwrap(), s);
    assert_ne!(
        perturbed.adjustment_forward(&items, None).unwrap().mu,
        net.adjustment_forward(&items, None).unwrap().mu
    );
    let pad_a = net.confounder_forward(&[0, 0, 0, 0, 0]).unwrap();
    let pad_b = net.confounder_forward(&[0, 0]).unwrap();
    assert_eq!(pad_a, pad_b);
    assert_eq!(net.confounder_forward(&items).unwrap(), s);
}

#[test]
fn inference_ignores_confounder() {
    for kind in EncoderKind::ALL {
        let net = toy(kind, true, Fusion::ConcatProjection);
        let ex = example(0, &[3, 9, 2], 4, 5);
        let base = net.inference_scores(&ex).unwrap();
        let mut noisy = net.clone();
        let mut rng = RngStream::new(3);
        for id in net.confounder_params() {
            for v in noisy.params.get_mut(id).data_mut() {
                *v = rng.normal();
            }
        }
        assert_eq!(noisy.inference_scores(&ex).unwrap(), base);
        assert_eq!(net.inference_scores(&ex).unwrap(), base);
        assert_eq!(base.values()[0], f64::NEG_INFINITY);

        // training path with sigma forced to zero and s masked
        let mu = net.adjustment_forward(&ex.items, None).unwrap();
        let r = DualRepresentation {
            confounder: Tensor::zeros(&[8]),
            adjustment: mu,
        };
        let path = crate::model::score_items(r.adjustment.t.data(), net.item_matrix());
        for (a, b) in path.values().iter().zip(base.values()).skip(1) {
            assert!((a - b).abs() < 1e-13);
        }
    }
}

fn gradcheck_full_loss(kind: EncoderKind, stochastic: bool, fusion: Fusion) {
    let net = toy(kind, stochastic, fusion);
    let exs = [
        example(0, &[1, 2, 3, 4], 5, 5),
        example(1, &[6, 7], 8, 5),
        example(2, &[9, 10, 11, 12, 13], 14, 5),
    ];
    let refs: Vec<&SequenceExample> = exs.iter().collect();
    let negatives = [15, 16, 17, 18, 19, 20];
    let spec = ObjectiveSpec {
        weights: LossWeights::new(0.1, 0.01, 0.5).unwrap(),
        ..Default::default()
    };
    let report = check_gradients(&net.params, &GradCheckOptions::default(), |g| {
        let mut noise = RngStream::new(42);
        build_loss(g, &net, &spec, &refs, &negatives, Some(&mut noise))
            .unwrap()
            .0
    })
    .unwrap();
    assert!(
        report.max_rel_error < 1e-4,
        "{kind} stochastic={stochastic}: {:?}",
        report.worst
    );
}

#[test]
fn full_loss_gradients_gru() {
    gradcheck_full_loss(EncoderKind::RecurrentGated, false, Fusion::Sum);
}

#[test]
fn full_loss_gradients_causal_stochastic() {
    gradcheck_full_loss(EncoderKind::SelfAttentionCausal, true, Fusion::Sum);
}

#[test]
fn full_loss_gradients_bidirectional_concat() {
    gradcheck_full_loss(
        EncoderKind::SelfAttentionBidirectional,
        true,
        Fusion::ConcatProjection,
    );
}

#[test]
fn breakdown_matches_graph_value() {
    let net = toy(EncoderKind::SelfAttentionCausal, false, Fusion::Sum);
    let exs = [example(0, &[1, 2], 3, 5), example(1, &[4, 5, 6], 7, 5)];
    let refs: Vec<&SequenceExample> = exs.iter().collect();
    let spec = ObjectiveSpec::default();
    let mut g = Graph::new(&net.params);
    let (loss, br) = build_loss(&mut g, &net, &spec, &refs, &[10, 11], None).unwrap();
    assert_relative_eq!(
        g.value(loss).item().unwrap(),
        br.total,
        max_relative = 1e-13
    );
    assert_eq!(br.total, br.term_a - br.term_b + br.term_c + br.term_d);

    // value-level terms agree with the graph
    let negs = [[10usize], [11]];
    let mut h = TermValues::default();
    let m = net.item_matrix();
    for (ex, neg) in exs.iter().zip(negs) {
        let r = DualRepresentation {
            adjustment: net.adjustment_forward(&ex.items, None).unwrap(),
            confounder: net.confounder_forward(&ex.items).unwrap(),
        };
        h.h_t += conditional_bpr(ex.target, &neg, &r, m, Condition::T).unwrap() / 2.0;
        h.h_s += conditional_bpr(ex.target, &neg, &r, m, Condition::S).unwrap() / 2.0;
        h.h_ts += conditional_bpr(ex.target, &neg, &r, m, Condition::Ts).unwrap() / 2.0;
    }
    let w = &spec.weights;
    assert_relative_eq!(br.term_a, w.coef_a() * h.h_t, max_relative = 1e-12);
    assert_relative_eq!(br.term_b, w.coef_b() * h.h_s, max_relative = 1e-12);
    assert_relative_eq!(br.term_c, w.coef_c() * h.h_ts, max_relative = 1e-12);
}

#[test]
fn stop_gradient_switch_blocks_term_b() {
    let net = toy(EncoderKind::RecurrentGated, false, Fusion::Sum);
    let exs = [example(0, &[1, 2, 3], 4, 5)];
    let refs: Vec<&SequenceExample> = exs.iter().collect();
    let only_b = ObjectiveSpec {
        mask: "b".parse().unwrap(),
        stop_term_b_gradient: true,
        ..Default::default()
    };
    let mut g = Graph::new(&net.params);
    let (loss, _) = build_loss(&mut g, &net, &only_b, &refs, &[9], None).unwrap();
    let grads = g.backward(loss).unwrap();
    for id in net.confounder_params() {
        assert!(grads.param(id).data().iter().all(|&x| x == 0.0));
    }
}
