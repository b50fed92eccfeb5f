//! Interaction logs: ingestion, k-core filtering, leave-one-out splits and
//! dataset statistics.

mod ingest;
mod splits;

pub use ingest::{ingest, ingest_str, Columns, Format, IngestReport};
pub use splits::{
    build_splits, five_core_filter, k_core_filter, load_splits, read_examples_jsonl, save_splits,
    stats, write_examples_jsonl, Catalog, DatasetSplits, DatasetStats, SequenceExample, PADDING,
    SPLIT_FILES,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("zero valid records ({malformed} malformed lines)")]
    NoRecords { malformed: usize },
    #[error("user '{user}' has {count} interactions after filtering; at least 3 are needed")]
    TooFewInteractions { user: String, count: usize },
    #[error("n_max must be at least 1")]
    ZeroLength,
    #[error("malformed split file {path}: {detail}")]
    BadSplitFile { path: String, detail: String },
    #[error("{0}")]
    Invalid(String),
}

/// One `(user, item, timestamp)` event.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

impl Interaction {
    pub fn new(user: impl Into<String>, item: impl Into<String>, timestamp: i64) -> Self {
        Self {
            user: user.into(),
            item: item.into(),
            timestamp,
        }
    }
}
