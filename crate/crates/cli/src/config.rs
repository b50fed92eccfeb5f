//! `key = value` config files and the settings they may contain. Command-line
//! flags are applied after the file, so they win.

use std::path::Path;
use std::str::FromStr;

use invrec::harness::TrainConfig;
use invrec::objective::ObjectiveKind;
use invrec::synthetic::SynthConfig;

use crate::exit::ConfigError;

pub type Pairs = Vec<(String, String)>;

pub fn normalize_key(key: &str) -> String {
    key.trim().to_ascii_lowercase().replace('-', "_")
}

/// Blank lines and lines starting with `#` are ignored.
pub fn parse_pairs(text: &str, origin: &str) -> Result<Pairs, ConfigError> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError(format!(
                "{origin}:{}: expected key = value, got '{line}'",
                no + 1
            )));
        };
        let key = normalize_key(k);
        if key.is_empty() {
            return Err(ConfigError(format!("{origin}:{}: empty key", no + 1)));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_pairs(path: &Path) -> Result<Pairs, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("cannot read config file {}: {e}", path.display())))?;
    parse_pairs(&text, &path.display().to_string())
}

/// File pairs first, then flag pairs.
pub fn merged(file: Option<&Path>, flags: Pairs) -> Result<Pairs, ConfigError> {
    let mut pairs = match file {
        Some(p) => read_pairs(p)?,
        None => Vec::new(),
    };
    pairs.extend(flags);
    Ok(pairs)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| ConfigError(format!("{key} = '{value}': {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(ConfigError(format!(
            "{key} = '{value}': expected true or false"
        ))),
    }
}

pub const TRAIN_KEYS: &[&str] = &[
    "encoder",
    "confounder_encoder",
    "d",
    "layers",
    "heads",
    "batch_size",
    "n_max",
    "lr",
    "weight_decay",
    "objective",
    "alpha",
    "beta",
    "gamma",
    "terms",
    "detach_confounder",
    "stop_term_b_gradient",
    "stochastic",
    "sigma_init",
    "fusion",
    "negatives",
    "max_epochs",
    "patience",
    "allow_off_grid",
];

pub fn apply_train(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<(), ConfigError> {
    let w = &mut cfg.objective.weights;
    match key {
        "encoder" => cfg.encoder = parse(key, value)?,
        "confounder_encoder" => cfg.confounder_encoder = Some(parse(key, value)?),
        "d" => cfg.d = parse(key, value)?,
        "layers" => cfg.layers = Some(parse(key, value)?),
        "heads" => cfg.heads = parse(key, value)?,
        "batch_size" => cfg.batch_size = parse(key, value)?,
        "n_max" => cfg.n_max = parse(key, value)?,
        "lr" => cfg.lr = parse(key, value)?,
        "weight_decay" => cfg.weight_decay = parse(key, value)?,
        "objective" => {
            cfg.objective.kind = match value {
                "base" => ObjectiveKind::Base,
                "invariant" | "full" => ObjectiveKind::Invariant,
                _ => {
                    return Err(ConfigError(format!(
                        "objective = '{value}': expected base or invariant"
                    )))
                }
            }
        }
        "alpha" => w.alpha = parse(key, value)?,
        "beta" => w.beta = parse(key, value)?,
        "gamma" => w.gamma = parse(key, value)?,
        "terms" => cfg.objective.mask = parse(key, value)?,
        "detach_confounder" => cfg.objective.detach_confounder = parse_bool(key, value)?,
        "stop_term_b_gradient" => cfg.objective.stop_term_b_gradient = parse_bool(key, value)?,
        "stochastic" => cfg.stochastic = parse_bool(key, value)?,
        "sigma_init" => cfg.sigma_init = parse(key, value)?,
        "fusion" => cfg.fusion = parse(key, value)?,
        "negatives" => cfg.negatives = parse(key, value)?,
        "max_epochs" => cfg.max_epochs = parse(key, value)?,
        "patience" => cfg.patience = parse(key, value)?,
        "allow_off_grid" => cfg.allow_off_grid = parse_bool(key, value)?,
        _ => {
            return Err(ConfigError(format!(
                "unknown training setting '{key}' (known: {})",
                TRAIN_KEYS.join(", ")
            )))
        }
    }
    Ok(())
}

pub fn train_config(pairs: &Pairs, seed: u64) -> Result<TrainConfig, ConfigError> {
    let mut cfg = TrainConfig::default();
    for (k, v) in pairs {
        apply_train(&mut cfg, k, v)?;
    }
    cfg.seed = seed;
    cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
    Ok(cfg)
}

pub const SYNTH_KEYS: &[&str] = &[
    "n_users",
    "n_items",
    "d_true",
    "n_tags",
    "history_length",
    "spurious_strength",
    "flip_at_test",
    "preference_scale",
    "tag_scale",
    "n_max",
];

pub fn apply_synth(cfg: &mut SynthConfig, key: &str, value: &str) -> Result<(), ConfigError> {
    match key {
        "n_users" => cfg.n_users = parse(key, value)?,
        "n_items" => cfg.n_items = parse(key, value)?,
        "d_true" => cfg.d_true = parse(key, value)?,
        "n_tags" => cfg.n_tags = parse(key, value)?,
        "history_length" => cfg.history_length = parse(key, value)?,
        "spurious_strength" | "rho" => cfg.spurious_strength = parse(key, value)?,
        "flip_at_test" => cfg.flip_at_test = parse_bool(key, value)?,
        "preference_scale" => cfg.preference_scale = parse(key, value)?,
        "tag_scale" => cfg.tag_scale = parse(key, value)?,
        "n_max" => cfg.n_max = parse(key, value)?,
        _ => {
            return Err(ConfigError(format!(
                "unknown synth setting '{key}' (known: {})",
                SYNTH_KEYS.join(", ")
            )))
        }
    }
    Ok(())
}

pub fn synth_config(pairs: &Pairs, seed: u64) -> Result<SynthConfig, ConfigError> {
    let mut cfg = SynthConfig::default();
    for (k, v) in pairs {
        apply_synth(&mut cfg, k, v)?;
    }
    cfg.seed = seed;
    cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct PrepareConfig {
    pub format: Option<String>,
    pub columns: Option<String>,
    pub n_max: usize,
    pub name: Option<String>,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        Self {
            format: None,
            columns: None,
            n_max: TrainConfig::default().n_max,
            name: None,
        }
    }
}

pub fn prepare_config(pairs: &Pairs) -> Result<PrepareConfig, ConfigError> {
    let mut cfg = PrepareConfig::default();
    for (key, value) in pairs {
        match key.as_str() {
            "format" => cfg.format = Some(value.clone()),
            "columns" => cfg.columns = Some(value.clone()),
            "n_max" => cfg.n_max = parse(key, value)?,
            "name" => cfg.name = Some(value.clone()),
            _ => {
                return Err(ConfigError(format!(
                    "unknown prepare setting '{key}' (known: format, columns, n_max, name)"
                )))
            }
        }
    }
    if cfg.n_max == 0 {
        return Err(ConfigError("n_max must be at least 1".into()));
    }
    Ok(cfg)
}
