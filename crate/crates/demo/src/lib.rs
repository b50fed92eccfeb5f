//! Browser bindings. Every export returns a JSON string; errors come back as
//! `{"error": "..."}` so the page never has to catch exceptions.

use serde_json::{json, Value};
use wasm_bindgen::prelude::wasm_bindgen;

use invrec::harness::{evaluate_examples, train, TrainConfig, CUTOFFS};
use invrec::model::EncoderKind;
use invrec::numerics::{RngStream, Tensor};
use invrec::objective::{compression_term, LossWeights, StochasticEmbedding};
use invrec::synthetic::{generate, tag_oracle_hit_rate, SynthConfig};

const MC_SAMPLES: usize = 20_000;

fn respond(result: Result<Value, String>) -> String {
    match result {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e }).to_string(),
    }
}

/// Closed-form KL(N(mu, diag sigma^2) || N(0, I)) next to a Monte Carlo
/// estimate from `MC_SAMPLES` draws.
pub fn compression_json(mu: &[f64], sigma: &[f64], seed: u64) -> Result<Value, String> {
    if mu.is_empty() || mu.len() != sigma.len() {
        return Err(format!(
            "mu has {} entries and sigma {}",
            mu.len(),
            sigma.len()
        ));
    }
    if sigma.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err("every sigma must be positive".into());
    }
    let emb = StochasticEmbedding {
        t: Tensor::vector(mu.to_vec()),
        mu: Tensor::vector(mu.to_vec()),
        sigma: Tensor::vector(sigma.to_vec()),
        deterministic: false,
    };
    let closed = compression_term(&emb).map_err(|e| e.to_string())?;
    let mut rng = RngStream::new(seed);
    let mut acc = 0.0;
    for _ in 0..MC_SAMPLES {
        for (m, s) in mu.iter().zip(sigma) {
            let z = rng.normal();
            let x = m + s * z;
            acc += 0.5 * (x * x - z * z) - s.ln();
        }
    }
    let per_dim: Vec<f64> = mu
        .iter()
        .zip(sigma)
        .map(|(m, s)| 0.5 * (m * m + s * s - (s * s).ln() - 1.0))
        .collect();
    Ok(json!({
        "closed_form": closed,
        "monte_carlo": acc / MC_SAMPLES as f64,
        "samples": MC_SAMPLES,
        "per_dimension": per_dim,
    }))
}

fn demo_synth(rho: f64, flip: bool, seed: u64) -> SynthConfig {
    SynthConfig {
        n_users: 400,
        n_items: 120,
        history_length: 10,
        spurious_strength: rho,
        flip_at_test: flip,
        seed,
        ..Default::default()
    }
}

/// How predictive the planted tag shortcut is on validation versus test.
pub fn synthetic_json(rho: f64, flip: bool, seed: u64) -> Result<Value, String> {
    let cfg = demo_synth(rho, flip, seed);
    let (splits, truth) = generate(&cfg).map_err(|e| e.to_string())?;
    let mut rng = RngStream::new(seed).derive("tag-oracle");
    let val = tag_oracle_hit_rate(&splits.validation, &truth, 10, &mut rng);
    let test = tag_oracle_hit_rate(&splits.test, &truth, 10, &mut rng);
    let mut tag_counts = vec![0usize; cfg.n_tags];
    for ex in &splits.train {
        tag_counts[truth.tag(ex.target)] += 1;
    }
    Ok(json!({
        "users": splits.catalog.n_users(),
        "items": splits.n_items(),
        "train_examples": splits.train.len(),
        "chance_hr10": 10.0 / splits.n_items() as f64,
        "tag_oracle_hr10": { "validation": val, "test": test },
        "train_targets_per_tag": tag_counts,
    }))
}

/// Trains the single-encoder base model and the full objective on the same
/// small benchmark and reports test HR@20 / NDCG@20 for both.
pub fn compare_json(
    rho: f64,
    alpha: f64,
    gamma: f64,
    epochs: usize,
    seed: u64,
) -> Result<Value, String> {
    if epochs == 0 || epochs > 50 {
        return Err("epochs must be between 1 and 50".into());
    }
    let weights = LossWeights::new(alpha, 0.01, gamma).map_err(|e| e.to_string())?;
    let (splits, _) = generate(&demo_synth(rho, true, seed)).map_err(|e| e.to_string())?;
    let mut cfg = TrainConfig {
        encoder: EncoderKind::RecurrentGated,
        d: 16,
        batch_size: 128,
        max_epochs: epochs,
        patience: epochs,
        seed,
        ..Default::default()
    };
    cfg.objective.weights = weights;
    let mut rows = serde_json::Map::new();
    for (name, c) in [("base", cfg.as_base()), ("full", cfg.clone())] {
        let out = train(&splits, &c).map_err(|e| e.to_string())?;
        let m =
            evaluate_examples(&out.network, &splits.test, &CUTOFFS).map_err(|e| e.to_string())?;
        let curve: Vec<f64> = out.log.epochs.iter().map(|e| e.validation_ndcg10).collect();
        rows.insert(
            name.into(),
            json!({ "hr20": m.hr[&20], "ndcg20": m.ndcg[&20], "best_epoch": out.best_epoch + 1, "validation_ndcg10": curve }),
        );
    }
    rows.insert("warnings".into(), json!(weights.warnings()));
    Ok(Value::Object(rows))
}

#[wasm_bindgen]
pub fn compression(mu: Vec<f64>, sigma: Vec<f64>, seed: u32) -> String {
    respond(compression_json(&mu, &sigma, seed as u64))
}

#[wasm_bindgen]
pub fn synthetic_preview(rho: f64, flip: bool, seed: u32) -> String {
    respond(synthetic_json(rho, flip, seed as u64))
}

#[wasm_bindgen]
pub fn train_compare(rho: f64, alpha: f64, gamma: f64, epochs: u32, seed: u32) -> String {
    respond(compare_json(
        rho,
        alpha,
        gamma,
        epochs as usize,
        seed as u64,
    ))
}
