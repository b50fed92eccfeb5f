use super::*;
use crate::data::DatasetSplits;
use crate::objective::{LossWeights, Network, TermMask};
use crate::synthetic::{generate, SynthConfig};

fn tiny_splits(seed: u64) -> DatasetSplits {
    let cfg = SynthConfig {
        n_users: 150,
        n_items: 60,
        history_length: 8,
        n_max: 8,
        seed,
        ..Default::default()
    };
    generate(&cfg).unwrap().0
}

fn tiny_config(kind: EncoderKind) -> TrainConfig {
    TrainConfig {
        encoder: kind,
        d: 8,
        batch_size: 64,
        n_max: 8,
        max_epochs: 3,
        patience: 10,
        seed: 5,
        ..Default::default()
    }
}

#[test]
fn grid_enforced_unless_overridden() {
    let mut c = TrainConfig {
        lr: 2e-3,
        ..Default::default()
    };
    assert!(c.validate().is_err());
    c.allow_off_grid = true;
    assert!(c.validate().is_ok());
    let c = TrainConfig {
        weight_decay: 1e-3,
        ..Default::default()
    };
    assert!(c.validate().is_err());
    let d = TrainConfig::default();
    assert_eq!(
        (d.d, d.batch_size, d.n_max, d.patience, d.max_epochs),
        (64, 256, 20, 10, 200)
    );
}

#[test]
fn same_seed_same_checkpoint() {
    let splits = tiny_splits(1);
    let cfg = tiny_config(EncoderKind::SelfAttentionCausal);
    let a = train(&splits, &cfg).unwrap();
    let b = train(&splits, &cfg).unwrap();
    assert_eq!(
        Checkpoint::new(&cfg, &a).to_json(),
        Checkpoint::new(&cfg, &b).to_json()
    );
    assert_eq!(a.log, b.log);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let splits = tiny_splits(2);
    let cfg = tiny_config(EncoderKind::RecurrentGated);
    let out = train(&splits, &cfg).unwrap();
    let ck = Checkpoint::new(&cfg, &out);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    for (a, b) in ck
        .network
        .params
        .entries()
        .iter()
        .zip(back.network.params.entries())
    {
        assert_eq!(a.name, b.name);
        let bits =
            |t: &crate::numerics::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.tensor), bits(&b.tensor));
    }
    assert_eq!(back, ck);
    let mut wrong = ck.to_json();
    wrong = wrong.replacen("\"version\":1", "\"version\":99", 1);
    assert!(Checkpoint::from_json(&wrong).is_err());
}

#[test]
fn patience_zero_stops_one_epoch_after_best() {
    let splits = tiny_splits(3);
    let cfg = TrainConfig {
        patience: 0,
        max_epochs: 50,
        ..tiny_config(EncoderKind::RecurrentGated)
    };
    let out = train(&splits, &cfg).unwrap();
    let epochs = out.log.epochs.len();
    assert!(epochs < 50);
    assert_eq!(epochs, out.best_epoch + 2);
    assert!(!out.log.epochs.last().unwrap().improved);
}

#[test]
fn padding_row_stays_zero() {
    let splits = tiny_splits(4);
    let out = train(
        &splits,
        &tiny_config(EncoderKind::SelfAttentionBidirectional),
    )
    .unwrap();
    let m = out.network.item_matrix();
    assert!(m.row(0).iter().all(|&x| x == 0.0));
}

#[test]
fn step_log_records_the_breakdown() {
    let splits = tiny_splits(5);
    let cfg = tiny_config(EncoderKind::SelfAttentionCausal);
    let out = train(&splits, &cfg).unwrap();
    let steps_per_epoch = splits.train.len().div_ceil(cfg.batch_size);
    assert_eq!(out.log.steps.len(), steps_per_epoch * out.log.epochs.len());
    let line = out.log.steps_jsonl().lines().next().unwrap().to_string();
    let v: serde_json::Value = serde_json::from_str(&line).unwrap();
    for key in ["step", "term_a", "term_b", "term_c", "term_d", "total"] {
        assert!(v.get(key).is_some(), "{key} missing from {line}");
    }
    for s in &out.log.steps {
        assert_eq!(
            s.loss.total,
            s.loss.term_a - s.loss.term_b + s.loss.term_c + s.loss.term_d
        );
    }
}

/// Zero weights, no sampling and a detached confounder train the shared
/// parameters exactly like the single-encoder ranking objective.
#[test]
fn zero_weights_reduce_to_base_training() {
    let splits = tiny_splits(6);
    for kind in EncoderKind::ALL {
        let mut full = TrainConfig {
            max_epochs: 3,
            ..tiny_config(kind)
        };
        full.objective.weights = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
        };
        full.objective.detach_confounder = true;
        let base = full.as_base();
        let a = train(&splits, &full).unwrap();
        let b = train(&splits, &base).unwrap();
        let la: Vec<u64> = a.log.steps.iter().map(|s| s.loss.total.to_bits()).collect();
        let lb: Vec<u64> = b.log.steps.iter().map(|s| s.loss.total.to_bits()).collect();
        assert_eq!(la, lb, "{kind}");
        for e in b.network.params.entries() {
            let other = a
                .network
                .params
                .get(a.network.params.id_of(&e.name).unwrap());
            assert!(
                e.tensor
                    .data()
                    .iter()
                    .zip(other.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits()),
                "{kind}: {}",
                e.name
            );
        }
    }
}

#[test]
fn untrained_model_ranks_at_chance() {
    let (splits, _) = generate(&SynthConfig {
        seed: 9,
        ..Default::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        d: 16,
        ..Default::default()
    };
    let net = Network::new(cfg.network_config(splits.n_items()), 1).unwrap();
    let report = evaluate(&Checkpoint::untrained(&cfg, net), &splits, Split::Test).unwrap();
    let chance = 10.0 / splits.n_items() as f64;
    let sd = (chance * (1.0 - chance) / splits.test.len() as f64).sqrt();
    assert!(
        (report.metrics.hr[&10] - chance).abs() < 4.0 * sd,
        "{:?}",
        report.metrics
    );
    assert!(report.metrics.is_consistent());
    assert_eq!(report.n_users, splits.test.len());
}

#[test]
fn evaluate_matches_per_example_oracle() {
    let splits = tiny_splits(7);
    let cfg = tiny_config(EncoderKind::RecurrentGated);
    let out = train(&splits, &cfg).unwrap();
    let report = evaluate(&Checkpoint::new(&cfg, &out), &splits, Split::Validation).unwrap();
    let mut ranks = Vec::new();
    for ex in &splits.validation {
        let s = out.network.inference_scores(ex).unwrap();
        let t = s.values()[ex.target];
        ranks.push(
            1 + (1..s.len())
                .filter(|&i| i != ex.target && s.values()[i] >= t)
                .count(),
        );
    }
    let hand = Metrics::from_ranks(&ranks, &CUTOFFS);
    for k in CUTOFFS {
        assert!((hand.hr[&k] - report.metrics.hr[&k]).abs() < 1e-12);
        assert!((hand.ndcg[&k] - report.metrics.ndcg[&k]).abs() < 1e-12);
    }
    let other = tiny_splits(8);
    let mut fewer = other.clone();
    fewer.catalog.items.pop();
    assert!(matches!(
        evaluate(&Checkpoint::new(&cfg, &out), &fewer, Split::Test),
        Err(HarnessError::CatalogMismatch { .. })
    ));
}

#[test]
fn ablation_layout_and_noop_row() {
    let splits = tiny_splits(10);
    let mut cfg = TrainConfig {
        max_epochs: 2,
        ..tiny_config(EncoderKind::RecurrentGated)
    };
    // gamma = alpha: dropping term (b) changes nothing
    cfg.objective.weights = LossWeights {
        alpha: 0.5,
        beta: 0.01,
        gamma: 0.5,
    };
    let table = ablate(&splits, &cfg, &[1, 2], "tiny").unwrap();
    let labels: Vec<&str> = table.rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["raw", "w/o (1)", "w/o (2)", "w/o (3)"]);
    assert_eq!(table.rows[1].mask, TermMask::ALL.without('a'));
    assert_eq!(table.rows[0].metrics, table.rows[2].metrics);
    let text = table.to_text();
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().next().unwrap().contains("NDCG@20"));
    for r in &table.rows {
        assert!(r.metrics.is_consistent());
        assert_eq!(r.per_seed.len(), 2);
    }
}

#[test]
fn comparison_text_has_improvement_row() {
    let base = Metrics::from_ranks(&[1, 4, 30], &CUTOFFS);
    let better = Metrics::from_ranks(&[1, 2, 8], &CUTOFFS);
    let t = comparison_table(&base, &better);
    let last = t.lines().last().unwrap();
    assert!(last.starts_with("improv."));
    assert!(last.contains('%'));
}
