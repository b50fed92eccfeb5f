mod config;
mod exit;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use invrec::data::{
    build_splits, five_core_filter, ingest, load_splits, save_splits, stats, Columns,
    DatasetSplits, Format,
};
use invrec::harness::{ablate, comparison_table, evaluate, train, Checkpoint, Split};
use invrec::numerics::RngStream;
use invrec::objective::identity::run_identity_suite;
use invrec::objective::{run_gradient_suite, Fusion};
use invrec::synthetic::{generate, tag_oracle_hit_rate};

use config::Pairs;
use exit::{CheckFailed, ConfigError};

#[derive(Parser)]
#[command(
    name = "invrec",
    version,
    about = "Sequential recommendation with invariant representations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest an interaction log, apply the 5-core filter and write leave-one-out splits
    Prepare(PrepareArgs),
    /// Train a model on prepared splits
    Train(TrainArgs),
    /// Evaluate a checkpoint with full-catalog ranking
    Eval(EvalArgs),
    /// Train the full objective and the three single-term ablations
    Ablate(AblateArgs),
    /// Generate the planted-confounder benchmark
    Synth(SynthArgs),
    /// Run the information-identity and gradient self-checks
    Check(CheckArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Interaction log (csv, tsv or json lines)
    #[arg(long)]
    input: PathBuf,
    /// Output root; writes splits/ and reports/ beneath it
    #[arg(long)]
    out: PathBuf,
    /// key = value settings file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input format: csv, tsv or jsonl [default: from the file extension]
    #[arg(long)]
    format: Option<String>,
    /// Column order for headerless delimited input, e.g. user,item,rating,timestamp [default: header, else user,item,timestamp]
    #[arg(long)]
    columns: Option<String>,
    /// Longest context kept per example [default: 20]
    #[arg(long)]
    n_max: Option<usize>,
    /// Dataset label for the stats row [default: input file stem]
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args)]
struct TrainFlags {
    /// key = value settings file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sequence encoder: gru, sasrec or bert [default: sasrec]
    #[arg(long)]
    encoder: Option<String>,
    /// Confounder encoder variant [default: same as --encoder]
    #[arg(long)]
    confounder_encoder: Option<String>,
    /// Embedding width [default: 64]
    #[arg(long)]
    d: Option<usize>,
    /// Encoder depth [default: 1 for gru, 2 for attention]
    #[arg(long)]
    layers: Option<usize>,
    /// Attention heads [default: 2]
    #[arg(long)]
    heads: Option<usize>,
    /// Mini-batch size [default: 256]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Position table size; must cover the splits [default: 20]
    #[arg(long)]
    n_max: Option<usize>,
    /// Adam learning rate, one of 1e-3, 5e-4, 1e-4 [default: 1e-3]
    #[arg(long)]
    lr: Option<f64>,
    /// L2 weight decay, one of 1e-4, 1e-6, 1e-8, 0 [default: 0]
    #[arg(long)]
    weight_decay: Option<f64>,
    /// base (ranking loss on one encoder) or invariant [default: invariant]
    #[arg(long)]
    objective: Option<String>,
    /// Weight alpha on H(y|s) [default: 0.4]
    #[arg(long)]
    alpha: Option<f64>,
    /// Weight beta on the compression term [default: 0.01]
    #[arg(long)]
    beta: Option<f64>,
    /// Weight gamma on H(y|t,s) [default: 0.5]
    #[arg(long)]
    gamma: Option<f64>,
    /// Loss terms to include, comma separated from a,b,c,d [default: a,b,c,d]
    #[arg(long)]
    terms: Option<String>,
    /// Stop gradients from the confounder into the shared item embeddings [default: false]
    #[arg(long)]
    detach_confounder: Option<bool>,
    /// Let term (b) train only the confounder encoder [default: false]
    #[arg(long)]
    stop_term_b_gradient: Option<bool>,
    /// Sample t from N(mu, sigma^2) during training [default: false]
    #[arg(long)]
    stochastic: Option<bool>,
    /// Initial sigma in stochastic mode [default: 0.1]
    #[arg(long)]
    sigma_init: Option<f64>,
    /// Combination of t and s for H(y|t,s): sum or concat [default: sum]
    #[arg(long)]
    fusion: Option<String>,
    /// Sampled negatives per positive [default: 1]
    #[arg(long)]
    negatives: Option<usize>,
    /// Epoch cap [default: 200]
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Epochs without validation NDCG@10 improvement before stopping [default: 10]
    #[arg(long)]
    patience: Option<usize>,
    /// Accept learning rates and weight decays outside the grids [default: false]
    #[arg(long)]
    allow_off_grid: Option<bool>,
}

impl TrainFlags {
    fn pairs(&self) -> Pairs {
        let mut p: Pairs = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                p.push((k.to_string(), v));
            }
        };
        let s = |v: &Option<String>| v.clone();
        let n = |v: Option<usize>| v.map(|x| x.to_string());
        let f = |v: Option<f64>| v.map(|x| x.to_string());
        let b = |v: Option<bool>| v.map(|x| x.to_string());
        put("encoder", s(&self.encoder));
        put("confounder_encoder", s(&self.confounder_encoder));
        put("d", n(self.d));
        put("layers", n(self.layers));
        put("heads", n(self.heads));
        put("batch_size", n(self.batch_size));
        put("n_max", n(self.n_max));
        put("lr", f(self.lr));
        put("weight_decay", f(self.weight_decay));
        put("objective", s(&self.objective));
        put("alpha", f(self.alpha));
        put("beta", f(self.beta));
        put("gamma", f(self.gamma));
        put("terms", s(&self.terms));
        put("detach_confounder", b(self.detach_confounder));
        put("stop_term_b_gradient", b(self.stop_term_b_gradient));
        put("stochastic", b(self.stochastic));
        put("sigma_init", f(self.sigma_init));
        put("fusion", s(&self.fusion));
        put("negatives", n(self.negatives));
        put("max_epochs", n(self.max_epochs));
        put("patience", n(self.patience));
        put("allow_off_grid", b(self.allow_off_grid));
        p
    }

    fn resolve(&self, seed: u64) -> Result<invrec::harness::TrainConfig> {
        let pairs = config::merged(self.config.as_deref(), self.pairs())?;
        Ok(config::train_config(&pairs, seed)?)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Prepared data: an output root containing splits/, or a splits directory
    #[arg(long)]
    data: PathBuf,
    /// Seed for initialization, shuffling, negatives and noise
    #[arg(long)]
    seed: u64,
    /// Output root for checkpoints/ and reports/ [default: the data root]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run identifier used in file names [default: UTC timestamp]
    #[arg(long)]
    run_id: Option<String>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Prepared data: an output root containing splits/, or a splits directory
    #[arg(long)]
    data: PathBuf,
    /// validation or test [default: test]
    #[arg(long, default_value = "test")]
    split: String,
    /// Base-model checkpoint; adds a comparison with relative improvement
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Output root for reports/ [default: the data root]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run identifier used in file names [default: UTC timestamp]
    #[arg(long)]
    run_id: Option<String>,
}

#[derive(Args)]
struct AblateArgs {
    /// Prepared data: an output root containing splits/, or a splits directory
    #[arg(long)]
    data: PathBuf,
    /// First seed; runs use seed, seed+1, ...
    #[arg(long)]
    seed: u64,
    /// Number of seeds per row [default: 5]
    #[arg(long, default_value_t = 5)]
    n_seeds: u64,
    /// Dataset label for the table [default: data directory name]
    #[arg(long)]
    name: Option<String>,
    /// Output root for reports/ [default: the data root]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run identifier used in file names [default: UTC timestamp]
    #[arg(long)]
    run_id: Option<String>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    seed: u64,
    /// Output root; writes splits/, reports/ and ground_truth.json beneath it
    #[arg(long)]
    out: PathBuf,
    /// key = value settings file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Users [default: 2000]
    #[arg(long)]
    n_users: Option<usize>,
    /// Items [default: 500]
    #[arg(long)]
    n_items: Option<usize>,
    /// Dimension of the planted preferences [default: 8]
    #[arg(long)]
    d_true: Option<usize>,
    /// Number of tags [default: 16]
    #[arg(long)]
    n_tags: Option<usize>,
    /// Interactions per user [default: 10]
    #[arg(long)]
    history_length: Option<usize>,
    /// Weight rho of the tag affinity during training [default: 0.8]
    #[arg(long, alias = "rho")]
    spurious_strength: Option<f64>,
    /// Draw the test item from preference alone [default: true]
    #[arg(long)]
    flip_at_test: Option<bool>,
    /// Preference logit scale [default: 10]
    #[arg(long)]
    preference_scale: Option<f64>,
    /// Tag logit scale [default: 4]
    #[arg(long)]
    tag_scale: Option<f64>,
    /// Longest context kept per example [default: 20]
    #[arg(long)]
    n_max: Option<usize>,
}

impl SynthArgs {
    fn pairs(&self) -> Pairs {
        let mut p = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                p.push((k.to_string(), v));
            }
        };
        let n = |v: Option<usize>| v.map(|x| x.to_string());
        let f = |v: Option<f64>| v.map(|x| x.to_string());
        put("n_users", n(self.n_users));
        put("n_items", n(self.n_items));
        put("d_true", n(self.d_true));
        put("n_tags", n(self.n_tags));
        put("history_length", n(self.history_length));
        put("spurious_strength", f(self.spurious_strength));
        put("flip_at_test", self.flip_at_test.map(|b| b.to_string()));
        put("preference_scale", f(self.preference_scale));
        put("tag_scale", f(self.tag_scale));
        put("n_max", n(self.n_max));
        p
    }
}

#[derive(Args)]
struct CheckArgs {
    /// Seed for the random tables and toy networks
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random variational distributions tried per bound check [default: 100]
    #[arg(long, default_value_t = 100)]
    bounds: usize,
    /// Also write reports/check.json beneath this directory
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run_id(given: &Option<String>) -> String {
    given
        .clone()
        .unwrap_or_else(|| chrono::Utc::now().format("%Y%m%dT%H%M%SZ").to_string())
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Accepts an output root containing `splits/` or the splits directory itself.
fn locate_splits(data: &Path) -> Result<(PathBuf, PathBuf)> {
    if data.join("splits").join("catalog.json").is_file() {
        return Ok((data.join("splits"), data.to_path_buf()));
    }
    if data.join("catalog.json").is_file() {
        let root = data
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        return Ok((data.to_path_buf(), root.to_path_buf()));
    }
    Err(invrec::data::DataError::Invalid(format!(
        "no prepared splits found under {}",
        data.display()
    ))
    .into())
}

fn load(data: &Path) -> Result<(DatasetSplits, PathBuf)> {
    let (dir, root) = locate_splits(data)?;
    let (splits, _) =
        load_splits(&dir).with_context(|| format!("loading splits from {}", dir.display()))?;
    Ok((splits, root))
}

fn cmd_prepare(a: &PrepareArgs) -> Result<()> {
    let mut flags: Pairs = Vec::new();
    for (k, v) in [
        ("format", &a.format),
        ("columns", &a.columns),
        ("name", &a.name),
    ] {
        if let Some(v) = v {
            flags.push((k.into(), v.clone()));
        }
    }
    if let Some(n) = a.n_max {
        flags.push(("n_max".into(), n.to_string()));
    }
    let cfg = config::prepare_config(&config::merged(a.config.as_deref(), flags)?)?;
    let format = match &cfg.format {
        Some(f) => f
            .parse::<Format>()
            .map_err(|e| ConfigError(e.to_string()))?,
        None => Format::from_path(&a.input),
    };
    let columns = match &cfg.columns {
        Some(c) => Some(Columns::from_names(c).map_err(|e| ConfigError(e.to_string()))?),
        None => None,
    };
    let (raw, ingest_report) = ingest(&a.input, format, columns)?;
    let filtered = five_core_filter(&raw);
    let splits = build_splits(&filtered, cfg.n_max)?;
    let name = cfg.name.clone().unwrap_or_else(|| {
        a.input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    });
    let meta = json!({
        "command": "prepare",
        "input": a.input.display().to_string(),
        "config": cfg,
        "seed": Value::Null,
    });
    save_splits(&a.out.join("splits"), &splits, &meta)?;
    let st = stats(&splits);
    let row = st.table_row(&name);
    write_json(
        &a.out.join("reports").join("stats.json"),
        &json!({
            "meta": meta,
            "dataset": name,
            "stats": st,
            "table_row": row,
            "ingest": ingest_report,
            "interactions_before_filter": raw.len(),
        }),
    )?;
    println!("dataset\t#users\t#items\t#actions\tavg.length\tsparsity");
    println!("{row}");
    if ingest_report.malformed > 0 {
        eprintln!(
            "skipped {} malformed records (first lines: {:?})",
            ingest_report.malformed, ingest_report.malformed_lines
        );
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = a.flags.resolve(a.seed)?;
    for w in cfg.objective.weights.warnings() {
        eprintln!("warning: {w}");
    }
    let (splits, root) = load(&a.data)?;
    let out_root = a.out.clone().unwrap_or(root);
    let id = run_id(&a.run_id);
    let outcome = train(&splits, &cfg)?;
    let ck = Checkpoint::new(&cfg, &outcome);
    let ck_path = out_root.join("checkpoints").join(format!("{id}.json"));
    std::fs::create_dir_all(ck_path.parent().unwrap())?;
    ck.save(&ck_path)?;
    let meta = json!({"command": "train", "run_id": id, "seed": cfg.seed, "config": cfg.echo()});
    let reports = out_root.join("reports");
    let mut steps = serde_json::to_string(&json!({ "meta": meta }))?;
    steps.push('\n');
    steps.push_str(&outcome.log.steps_jsonl());
    write_text(&reports.join(format!("{id}-steps.jsonl")), &steps)?;
    let mut epochs = serde_json::to_string(&json!({ "meta": meta }))?;
    epochs.push('\n');
    for e in &outcome.log.epochs {
        epochs.push_str(&serde_json::to_string(e)?);
        epochs.push('\n');
    }
    write_text(&reports.join(format!("{id}-epochs.jsonl")), &epochs)?;
    let val = evaluate(&ck, &splits, Split::Validation)?;
    write_json(
        &reports.join(format!("{id}-validation.json")),
        &json!({ "meta": meta, "report": val }),
    )?;
    for w in &outcome.log.warnings {
        eprintln!("warning: {w}");
    }
    print!("{}", val.to_text());
    println!(
        "best epoch {} of {}; checkpoint {}",
        outcome.best_epoch + 1,
        outcome.log.epochs.len(),
        ck_path.display()
    );
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let which: Split = a
        .split
        .parse()
        .map_err(|e: invrec::harness::HarnessError| ConfigError(e.to_string()))?;
    let (splits, root) = load(&a.data)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let report = evaluate(&ck, &splits, which)?;
    let id = run_id(&a.run_id);
    let mut doc = json!({
        "meta": {"command": "eval", "run_id": id, "checkpoint": a.checkpoint.display().to_string(), "seed": ck.config.seed, "config": ck.config.echo()},
        "report": report,
    });
    print!("{}", report.to_text());
    if let Some(b) = &a.baseline {
        let base_ck = Checkpoint::load(b)?;
        let base = evaluate(&base_ck, &splits, which)?;
        let table = comparison_table(&base.metrics, &report.metrics);
        println!();
        print!("{table}");
        doc["baseline"] = json!({"checkpoint": b.display().to_string(), "config": base_ck.config.echo(), "report": base});
        doc["comparison"] = Value::String(table);
    }
    let out_root = a.out.clone().unwrap_or(root);
    write_json(
        &out_root
            .join("reports")
            .join(format!("{id}-eval-{}.json", a.split)),
        &doc,
    )?;
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    if a.n_seeds == 0 {
        return Err(ConfigError("n_seeds must be at least 1".into()).into());
    }
    let cfg = a.flags.resolve(a.seed)?;
    let (splits, root) = load(&a.data)?;
    let name = a.name.clone().unwrap_or_else(|| {
        root.canonicalize()
            .ok()
            .and_then(|p| p.file_name().map(|s| s.to_string_lossy().into_owned()))
            .unwrap_or_else(|| "dataset".into())
    });
    let seeds: Vec<u64> = (0..a.n_seeds).map(|i| a.seed + i).collect();
    let table = ablate(&splits, &cfg, &seeds, &name)?;
    let id = run_id(&a.run_id);
    let out_root = a.out.clone().unwrap_or(root);
    let reports = out_root.join("reports");
    let meta = json!({"command": "ablate", "run_id": id, "seed": a.seed, "seeds": seeds, "config": cfg.echo()});
    write_json(
        &reports.join(format!("{id}-ablation.json")),
        &json!({ "meta": meta, "table": table }),
    )?;
    print!("{}", table.to_text());
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let pairs = config::merged(a.config.as_deref(), a.pairs())?;
    let cfg = config::synth_config(&pairs, a.seed)?;
    let (splits, truth) = generate(&cfg)?;
    let meta = json!({"command": "synth", "seed": cfg.seed, "config": cfg});
    save_splits(&a.out.join("splits"), &splits, &meta)?;
    write_json(
        &a.out.join("ground_truth.json"),
        &json!({ "meta": meta, "ground_truth": truth }),
    )?;
    let mut rng = RngStream::new(cfg.seed).derive("tag-oracle");
    let st = stats(&splits);
    let oracle_val = tag_oracle_hit_rate(&splits.validation, &truth, 10, &mut rng);
    let oracle_test = tag_oracle_hit_rate(&splits.test, &truth, 10, &mut rng);
    write_json(
        &a.out.join("reports").join("stats.json"),
        &json!({
            "meta": meta,
            "stats": st,
            "table_row": st.table_row("synthetic"),
            "tag_oracle_hr10": {"validation": oracle_val, "test": oracle_test},
        }),
    )?;
    println!("{}", st.table_row("synthetic"));
    println!("tag-only oracle HR@10: validation {oracle_val:.4}, test {oracle_test:.4}");
    Ok(())
}

fn cmd_check(a: &CheckArgs) -> Result<()> {
    let identity = run_identity_suite(a.seed, a.bounds)?;
    let id_ok = identity.passes();
    println!(
        "{} identities: {} tables, max residual {:.1e}; bounds {} of {} hold; violation flagged: {}",
        if id_ok { "ok  " } else { "FAIL" },
        identity.tables_checked,
        identity.max_chain_residual.max(identity.max_entropy_residual),
        if identity.bounds_hold { identity.bounds_checked } else { 0 },
        identity.bounds_checked,
        identity.violation_flagged
    );
    let grads = run_gradient_suite(a.seed)?;
    let mut grad_ok = true;
    for c in &grads.cases {
        let ok = c.max_rel_error < 1e-4;
        grad_ok &= ok;
        println!(
            "{} gradients {:<6} stochastic={:<5} fusion={:<7} max rel error {:.1e} over {} entries",
            if ok { "ok  " } else { "FAIL" },
            c.encoder.to_string(),
            c.stochastic,
            match c.fusion {
                Fusion::Sum => "sum",
                Fusion::ConcatProjection => "concat",
            },
            c.max_rel_error,
            c.checked
        );
    }
    if let Some(out) = &a.out {
        write_json(
            &out.join("reports").join("check.json"),
            &json!({"meta": {"command": "check", "seed": a.seed, "bounds": a.bounds}, "identity": identity, "gradients": grads}),
        )?;
    }
    if id_ok && grad_ok {
        Ok(())
    } else {
        Err(CheckFailed.into())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() {
                exit::USAGE
            } else {
                exit::OK
            });
        }
    };
    let result = match &cli.command {
        Command::Prepare(a) => cmd_prepare(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Check(a) => cmd_check(a),
    };
    match result {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::code_for(&e))
        }
    }
}
