//! Acceptance criteria. Runs without the libtest harness so every criterion
//! prints one `PASS`/`FAIL`/`SKIP` line even when output is not captured.
//! Extra arguments filter criteria by substring.

use std::panic;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use invrec::data::{build_splits, five_core_filter, ingest, stats, Columns, Format, Interaction};
use invrec::harness::{
    ablate, evaluate_examples, hr_at_k, ndcg_at_k, rank_of_target, train, Metrics, TrainConfig,
    CUTOFFS,
};
use invrec::model::{EncoderKind, Scores};
use invrec::numerics::{RngStream, Tensor};
use invrec::objective::identity::run_identity_suite;
use invrec::objective::{
    compression_term, run_gradient_suite, LossWeights, StochasticEmbedding, TermMask,
};
use invrec::synthetic::{generate, SynthConfig};

fn report(name: &str, ok: bool, detail: impl AsRef<str>) {
    println!(
        "{} {name}: {}",
        if ok { "PASS" } else { "FAIL" },
        detail.as_ref()
    );
}

fn skip(name: &str, why: &str) {
    println!("SKIP {name}: {why}");
}

fn gradient_correctness() {
    let t0 = Instant::now();
    let suite = run_gradient_suite(11).unwrap();
    let checked: usize = suite.cases.iter().map(|c| c.checked).sum();
    let worst = suite.max_rel_error();
    let secs = t0.elapsed().as_secs_f64();
    let ok = suite.passes(1e-4) && suite.cases.len() == 9 && secs < 60.0;
    report(
        "gradient correctness",
        ok,
        format!(
            "max rel error {worst:.2e} over {checked} entries in {} configurations, {secs:.1}s",
            suite.cases.len()
        ),
    );
    assert!(ok);
}

fn compression_closed_form_vs_monte_carlo() {
    let t0 = Instant::now();
    let d = 8;
    let samples = 1_000_000;
    let mut rng = RngStream::new(2024);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mu: Vec<f64> = (0..d).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
        let sigma: Vec<f64> = (0..d).map(|_| rng.uniform_range(0.5, 2.0)).collect();
        let emb = StochasticEmbedding {
            t: Tensor::vector(mu.clone()),
            mu: Tensor::vector(mu.clone()),
            sigma: Tensor::vector(sigma.clone()),
            deterministic: false,
        };
        let closed = compression_term(&emb).unwrap();
        // E_q[log q(x) - log p(x)] with x = mu + sigma * z
        let mut acc = 0.0;
        for _ in 0..samples {
            let mut lr = 0.0;
            for j in 0..d {
                let z = rng.normal();
                let x = mu[j] + sigma[j] * z;
                lr += -0.5 * z * z - sigma[j].ln() + 0.5 * x * x;
            }
            acc += lr;
        }
        let mc = acc / samples as f64;
        worst = worst.max((closed - mc).abs() / mc.abs());
    }
    let secs = t0.elapsed().as_secs_f64();
    let ok = worst < 0.01 && secs < 60.0;
    report(
        "compression closed form",
        ok,
        format!("max rel deviation from Monte Carlo {worst:.2e}, {secs:.1}s"),
    );
    assert!(ok);
}

fn identity_suite() {
    let suite = run_identity_suite(17, 100).unwrap();
    let ok = suite.passes() && suite.bounds_checked >= 100;
    report(
        "identity suite",
        ok,
        format!(
            "{} tables, chain residual {:.1e}, entropy residual {:.1e}, {} bounds hold={}, violation flagged={}",
            suite.tables_checked,
            suite.max_chain_residual,
            suite.max_entropy_residual,
            suite.bounds_checked,
            suite.bounds_hold,
            suite.violation_flagged
        ),
    );
    assert!(ok);
}

fn reduction_to_base() {
    let (splits, _) = generate(&SynthConfig {
        n_users: 200,
        n_items: 80,
        history_length: 8,
        n_max: 8,
        seed: 31,
        ..Default::default()
    })
    .unwrap();
    let mut failures = Vec::new();
    for kind in EncoderKind::ALL {
        let mut full = TrainConfig {
            encoder: kind,
            d: 16,
            batch_size: 64,
            n_max: 8,
            max_epochs: 3,
            seed: 8,
            ..Default::default()
        };
        full.objective.weights = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
        };
        full.objective.detach_confounder = true;
        full.stochastic = false;
        let base = full.as_base();
        let a = train(&splits, &full).unwrap();
        let b = train(&splits, &base).unwrap();
        let bits = |o: &invrec::harness::TrainOutcome| {
            o.log
                .steps
                .iter()
                .map(|s| s.loss.total.to_bits())
                .collect::<Vec<_>>()
        };
        let same_losses = bits(&a) == bits(&b) && a.log.epochs.len() == 3;
        let same_params = b.network.params.entries().iter().all(|e| {
            let other = a
                .network
                .params
                .get(a.network.params.id_of(&e.name).unwrap());
            e.tensor
                .data()
                .iter()
                .zip(other.data())
                .all(|(x, y)| x.to_bits() == y.to_bits())
        });
        if !(same_losses && same_params) {
            failures.push(kind.to_string());
        }
    }
    let ok = failures.is_empty();
    report(
        "reduction",
        ok,
        if ok {
            "bit-identical losses and parameters over 3 epochs for gru, sasrec, bert".into()
        } else {
            format!("diverged for {failures:?}")
        },
    );
    assert!(ok);
}

/// Position of the target after a full descending sort that places tied
/// items ahead of it.
fn sort_oracle_rank(scores: &[f64], target: usize) -> usize {
    let mut order: Vec<usize> = (1..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then((a == target).cmp(&(b == target)))
    });
    order.iter().position(|&i| i == target).unwrap() + 1
}

fn metric_oracle() {
    let mut rng = RngStream::new(99);
    let mut mismatches = 0;
    let mut ranks = Vec::new();
    for v in 0..1000 {
        let n = rng.below(2, 300);
        // coarse integer scores force ties on every other vector
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if v % 2 == 0 {
                    rng.below(0, 10) as f64
                } else {
                    rng.normal()
                }
            })
            .collect();
        let target = rng.below(1, n);
        let want = sort_oracle_rank(&scores, target);
        let got = rank_of_target(&Scores(scores), target);
        for k in CUTOFFS {
            let hr = if want <= k { 1.0 } else { 0.0 };
            let ndcg = if want <= k {
                1.0 / (want as f64 + 1.0).log2()
            } else {
                0.0
            };
            if hr_at_k(got, k) != hr || ndcg_at_k(got, k) != ndcg {
                mismatches += 1;
            }
        }
        if got != want {
            mismatches += 1;
        }
        ranks.push(got);
    }
    let m = Metrics::from_ranks(&ranks, &CUTOFFS);
    let ok =
        mismatches == 0 && m.is_consistent() && m.hr[&5] <= m.hr[&10] && m.hr[&10] <= m.hr[&20];
    report(
        "metric oracle",
        ok,
        format!(
            "1000 vectors, {mismatches} mismatches, HR@5/10/20 = {:.3}/{:.3}/{:.3}",
            m.hr[&5], m.hr[&10], m.hr[&20]
        ),
    );
    assert!(ok);
}

fn random_log(rng: &mut RngStream, users: usize, items: usize, n: usize) -> Vec<Interaction> {
    (0..n)
        .map(|t| {
            Interaction::new(
                format!("u{}", rng.below(0, users)),
                format!("i{}", rng.below(0, items)),
                t as i64,
            )
        })
        .collect()
}

fn core_holds(xs: &[Interaction]) -> bool {
    let mut u = std::collections::HashMap::<&str, usize>::new();
    let mut i = std::collections::HashMap::<&str, usize>::new();
    for x in xs {
        *u.entry(&x.user).or_default() += 1;
        *i.entry(&x.item).or_default() += 1;
    }
    u.values().chain(i.values()).all(|&c| c >= 5)
}

fn real_data(var: &str) -> Option<PathBuf> {
    std::env::var_os(var)
        .map(PathBuf::from)
        .filter(|p| p.exists())
}

fn load_real(path: &Path) -> Vec<Interaction> {
    let format = Format::from_path(path);
    let cols = (format != Format::JsonLines)
        .then(|| Columns::from_names("user,item,rating,timestamp").unwrap());
    five_core_filter(&ingest(path, format, cols).unwrap().0)
}

fn preprocessing() {
    let mut rng = RngStream::new(5);
    let mut ok = true;
    for trial in 0..50 {
        let xs = random_log(&mut rng, 40 + trial, 30 + trial, 400 + 20 * trial);
        let once = five_core_filter(&xs);
        let twice = five_core_filter(&once);
        ok &= core_holds(&once) && once == twice;
    }
    report(
        "preprocessing property",
        ok,
        "five-core fixed point has no user or item under 5 and is idempotent (50 random logs)",
    );
    let expected = [
        ("INVREC_BEAUTY", (22363, 12101, 198502, "99.93%")),
        ("INVREC_SPORTS", (33598, 18357, 296337, "99.95%")),
    ];
    for (var, (users, items, actions, sparsity)) in expected {
        match real_data(var) {
            None => skip(
                &format!("preprocessing {var}"),
                "raw file not available; property substituted",
            ),
            Some(path) => {
                let s = stats(&build_splits(&load_real(&path), 50).unwrap());
                let row_ok = (s.users, s.items, s.actions) == (users, items, actions)
                    && format!("{:.2}%", s.sparsity * 100.0) == sparsity;
                report(&format!("preprocessing {var}"), row_ok, s.table_row(var));
                ok &= row_ok;
            }
        }
    }
    assert!(ok);
}

/// Training setup for the planted-confounder comparison.
fn synthetic_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        encoder: EncoderKind::RecurrentGated,
        seed,
        ..Default::default()
    };
    cfg.objective.weights = LossWeights::default();
    cfg
}

fn deconfounding_on_planted_benchmark() {
    let t0 = Instant::now();
    let seeds = [101u64, 102, 103, 104, 105];
    let (mut full, mut base, mut wo1) = (0.0, 0.0, 0.0);
    for &seed in &seeds {
        let (splits, _) = generate(&SynthConfig {
            spurious_strength: 0.8,
            flip_at_test: true,
            seed,
            ..Default::default()
        })
        .unwrap();
        let ndcg20 = |cfg: &TrainConfig| {
            let out = train(&splits, cfg).unwrap();
            evaluate_examples(&out.network, &splits.test, &CUTOFFS)
                .unwrap()
                .ndcg[&20]
        };
        let cfg = synthetic_config(seed);
        let f = ndcg20(&cfg);
        let b = ndcg20(&cfg.as_base());
        let mut ablated = cfg.clone();
        ablated.objective.mask = TermMask::ALL.without('a');
        let w = ndcg20(&ablated);
        println!("  seed {seed}: full {f:.4} base {b:.4} w/o (1) {w:.4}");
        full += f;
        base += b;
        wo1 += w;
    }
    let n = seeds.len() as f64;
    let (full, base, wo1) = (full / n, base / n, wo1 / n);
    let gain_base = full / base - 1.0;
    let gain_wo1 = full / wo1 - 1.0;
    let secs = t0.elapsed().as_secs_f64();
    let ok = gain_base > 0.05 && gain_wo1 > 0.05 && secs < 3600.0;
    report(
        "deconfounding",
        ok,
        format!(
            "mean NDCG@20 full {full:.4}, base {base:.4} ({:+.1}%), w/o (1) {wo1:.4} ({:+.1}%), {:.0}s",
            100.0 * gain_base,
            100.0 * gain_wo1,
            secs
        ),
    );
    assert!(ok);
}

fn directional_real_data() {
    let Some(path) = real_data("INVREC_BEAUTY") else {
        skip(
            "real-data direction",
            "set INVREC_BEAUTY to the Beauty ratings file to run",
        );
        return;
    };
    let splits = build_splits(&load_real(&path), 50).unwrap();
    let (mut fw, mut base) = (0.0, 0.0);
    for seed in [1u64, 2, 3] {
        let cfg = TrainConfig {
            encoder: EncoderKind::SelfAttentionBidirectional,
            n_max: 50,
            seed,
            ..Default::default()
        };
        for (c, acc) in [(cfg.clone(), &mut fw), (cfg.as_base(), &mut base)] {
            let out = train(&splits, &c).unwrap();
            *acc += evaluate_examples(&out.network, &splits.test, &CUTOFFS)
                .unwrap()
                .hr[&5]
                / 3.0;
        }
    }
    let ok = fw > base;
    report(
        "real-data direction",
        ok,
        format!("HR@5 framework {fw:.4} vs base {base:.4}"),
    );
    assert!(ok);
}

fn ablation_table_structure() {
    let (splits, _) = generate(&SynthConfig {
        n_users: 150,
        n_items: 60,
        history_length: 8,
        n_max: 8,
        seed: 41,
        ..Default::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        encoder: EncoderKind::RecurrentGated,
        d: 8,
        batch_size: 64,
        n_max: 8,
        max_epochs: 2,
        ..Default::default()
    };
    let table = ablate(&splits, &cfg, &[1], "synthetic").unwrap();
    let labels: Vec<&str> = table.rows.iter().map(|r| r.label.as_str()).collect();
    let text = table.to_text();
    let header = text.lines().next().unwrap_or_default();
    let ok = labels == ["raw", "w/o (1)", "w/o (2)", "w/o (3)"]
        && header.contains("synthetic")
        && header.contains("HR@20")
        && header.contains("NDCG@20")
        && text.lines().count() == 5
        && table
            .rows
            .iter()
            .all(|r| r.metrics.is_consistent() && r.per_seed.len() == 1);
    report("ablation table", ok, format!("rows {labels:?}"));
    assert!(ok);
}

const CRITERIA: &[(&str, fn())] = &[
    ("gradient_correctness", gradient_correctness),
    (
        "compression_closed_form_vs_monte_carlo",
        compression_closed_form_vs_monte_carlo,
    ),
    ("identity_suite", identity_suite),
    ("reduction_to_base", reduction_to_base),
    ("metric_oracle", metric_oracle),
    ("preprocessing", preprocessing),
    ("ablation_table_structure", ablation_table_structure),
    ("directional_real_data", directional_real_data),
    (
        "deconfounding_on_planted_benchmark",
        deconfounding_on_planted_benchmark,
    ),
];

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = Vec::new();
    for &(name, check) in CRITERIA {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        if panic::catch_unwind(check).is_err() {
            failed.push(name);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed {failed:?}");
        ExitCode::FAILURE
    }
}
