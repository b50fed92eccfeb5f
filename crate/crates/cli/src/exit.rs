//! Maps failures to process exit codes.

use std::fmt;

use invrec::data::DataError;
use invrec::harness::HarnessError;
use invrec::model::ModelError;
use invrec::numerics::NumericsError;
use invrec::objective::ObjectiveError;
use invrec::synthetic::SynthError;

pub const OK: u8 = 0;
pub const CHECK_FAILED: u8 = 1;
pub const USAGE: u8 = 2;
pub const CONFIG: u8 = 3;
pub const DATA: u8 = 4;
pub const DIVERGENCE: u8 = 5;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid config: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

/// A self-check ran to completion and reported a failure.
#[derive(Debug)]
pub struct CheckFailed;

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("one or more checks failed")
    }
}

impl std::error::Error for CheckFailed {}

fn numerics(e: &NumericsError) -> u8 {
    match e {
        NumericsError::NonFinite(_) => DIVERGENCE,
        _ => CONFIG,
    }
}

fn model(e: &ModelError) -> u8 {
    match e {
        ModelError::Config(_) => CONFIG,
        ModelError::Numerics(n) => numerics(n),
        _ => DATA,
    }
}

fn objective(e: &ObjectiveError) -> u8 {
    match e {
        ObjectiveError::Weights(_) | ObjectiveError::NoConfounder | ObjectiveError::ZeroSigma => {
            CONFIG
        }
        ObjectiveError::Model(m) => model(m),
        ObjectiveError::Numerics(n) => numerics(n),
        _ => DATA,
    }
}

pub fn code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return CONFIG;
        }
        if cause.is::<CheckFailed>() {
            return CHECK_FAILED;
        }
        if let Some(e) = cause.downcast_ref::<HarnessError>() {
            return match e {
                HarnessError::Config(_) => CONFIG,
                HarnessError::Divergence { .. } => DIVERGENCE,
                HarnessError::Objective(o) => objective(o),
                HarnessError::Model(m) => model(m),
                HarnessError::Numerics(n) => numerics(n),
                _ => DATA,
            };
        }
        if let Some(e) = cause.downcast_ref::<SynthError>() {
            return match e {
                SynthError::Config(_) => CONFIG,
                _ => DATA,
            };
        }
        if let Some(e) = cause.downcast_ref::<ObjectiveError>() {
            return objective(e);
        }
        if cause.is::<DataError>()
            || cause.is::<std::io::Error>()
            || cause.is::<serde_json::Error>()
        {
            return DATA;
        }
    }
    CHECK_FAILED
}
