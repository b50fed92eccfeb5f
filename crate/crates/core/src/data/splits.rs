use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{DataError, Interaction};

/// Item id reserved for left padding.
pub const PADDING: usize = 0;

/// Contiguous ids for users (`0..n_users`) and items (`1..=n_items`).
///
/// Ids are assigned in sorted order of the raw identifiers so the mapping
/// does not depend on the order of lines in the source file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    /// `items[i - 1]` is the raw id of item `i`.
    pub items: Vec<String>,
    pub users: Vec<String>,
    #[serde(skip)]
    item_index: HashMap<String, usize>,
    #[serde(skip)]
    user_index: HashMap<String, usize>,
}

impl Catalog {
    pub fn from_ids(mut users: Vec<String>, mut items: Vec<String>) -> Self {
        users.sort();
        users.dedup();
        items.sort();
        items.dedup();
        let mut c = Catalog {
            items,
            users,
            ..Default::default()
        };
        c.reindex();
        c
    }

    /// Rebuilds lookup tables after deserialization.
    pub fn reindex(&mut self) {
        self.item_index = self
            .items
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i + 1))
            .collect();
        self.user_index = self
            .users
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn item_id(&self, raw: &str) -> Option<usize> {
        self.item_index.get(raw).copied()
    }

    pub fn user_id(&self, raw: &str) -> Option<usize> {
        self.user_index.get(raw).copied()
    }

    pub fn item_name(&self, id: usize) -> Option<&str> {
        id.checked_sub(1)
            .and_then(|i| self.items.get(i))
            .map(String::as_str)
    }
}

/// A left-padded history of fixed length plus the item that follows it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceExample {
    pub user: usize,
    pub items: Vec<usize>,
    pub true_length: usize,
    pub target: usize,
}

impl SequenceExample {
    /// Keeps the most recent `n_max` items of `context` and left-pads with [`PADDING`].
    pub fn from_context(user: usize, context: &[usize], target: usize, n_max: usize) -> Self {
        let start = context.len().saturating_sub(n_max);
        let kept = &context[start..];
        let mut items = vec![PADDING; n_max - kept.len()];
        items.extend_from_slice(kept);
        Self {
            user,
            items,
            true_length: kept.len(),
            target,
        }
    }

    pub fn history(&self) -> &[usize] {
        &self.items[self.items.len() - self.true_length..]
    }

    /// Checks the padding and target invariants.
    pub fn validate(&self, n_items: usize) -> Result<(), DataError> {
        let n = self.items.len();
        let ok = self.target != PADDING
            && self.target <= n_items
            && self.true_length >= 1
            && self.true_length <= n
            && self.items[..n - self.true_length]
                .iter()
                .all(|&i| i == PADDING)
            && self.history().iter().all(|&i| i != PADDING && i <= n_items);
        if ok {
            Ok(())
        } else {
            Err(DataError::Invalid(format!(
                "invalid sequence example {self:?}"
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplits {
    pub train: Vec<SequenceExample>,
    pub validation: Vec<SequenceExample>,
    pub test: Vec<SequenceExample>,
    pub catalog: Catalog,
    pub n_max: usize,
    /// Number of retained interactions the splits were built from.
    pub actions: usize,
}

impl DatasetSplits {
    pub fn n_items(&self) -> usize {
        self.catalog.n_items()
    }

    /// Items each user interacted with inside the training period (contexts
    /// and targets of their training and validation examples).
    pub fn seen_items_by_user(&self) -> Vec<HashSet<usize>> {
        let mut seen = vec![HashSet::new(); self.catalog.n_users()];
        for ex in self.train.iter().chain(&self.validation) {
            let s = &mut seen[ex.user];
            s.extend(ex.history().iter().copied());
            s.insert(ex.target);
        }
        seen
    }
}

/// Iteratively drops users and items with fewer than `k` interactions until
/// nothing changes. Input order of the survivors is preserved.
pub fn k_core_filter(interactions: &[Interaction], k: usize) -> Vec<Interaction> {
    let mut keep = vec![true; interactions.len()];
    loop {
        let mut users: HashMap<&str, usize> = HashMap::new();
        let mut items: HashMap<&str, usize> = HashMap::new();
        for (x, _) in interactions.iter().zip(&keep).filter(|(_, k)| **k) {
            *users.entry(&x.user).or_default() += 1;
            *items.entry(&x.item).or_default() += 1;
        }
        let mut changed = false;
        for (x, flag) in interactions.iter().zip(keep.iter_mut()) {
            if *flag && (users[x.user.as_str()] < k || items[x.item.as_str()] < k) {
                *flag = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    interactions
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(x, _)| x.clone())
        .collect()
}

pub fn five_core_filter(interactions: &[Interaction]) -> Vec<Interaction> {
    k_core_filter(interactions, 5)
}

/// Leave-one-out splits: last item per user for test, penultimate for
/// validation, every earlier prefix position for training.
pub fn build_splits(
    interactions: &[Interaction],
    n_max: usize,
) -> Result<DatasetSplits, DataError> {
    if n_max == 0 {
        return Err(DataError::ZeroLength);
    }
    let catalog = Catalog::from_ids(
        interactions.iter().map(|x| x.user.clone()).collect(),
        interactions.iter().map(|x| x.item.clone()).collect(),
    );
    let mut per_user: BTreeMap<usize, Vec<(i64, usize, usize)>> = BTreeMap::new();
    for (order, x) in interactions.iter().enumerate() {
        let u = catalog.user_id(&x.user).expect("user in catalog");
        let i = catalog.item_id(&x.item).expect("item in catalog");
        per_user.entry(u).or_default().push((x.timestamp, order, i));
    }

    let mut splits = DatasetSplits {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        catalog,
        n_max,
        actions: interactions.len(),
    };
    for (u, mut events) in per_user {
        if events.len() < 3 {
            return Err(DataError::TooFewInteractions {
                user: splits.catalog.users[u].clone(),
                count: events.len(),
            });
        }
        events.sort_by_key(|&(t, order, _)| (t, order));
        let seq: Vec<usize> = events.iter().map(|e| e.2).collect();
        let len = seq.len();
        for j in 1..len - 2 {
            splits
                .train
                .push(SequenceExample::from_context(u, &seq[..j], seq[j], n_max));
        }
        splits.validation.push(SequenceExample::from_context(
            u,
            &seq[..len - 2],
            seq[len - 2],
            n_max,
        ));
        splits.test.push(SequenceExample::from_context(
            u,
            &seq[..len - 1],
            seq[len - 1],
            n_max,
        ));
    }
    Ok(splits)
}

/// Table-1 style summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    #[serde(rename = "#users")]
    pub users: usize,
    #[serde(rename = "#items")]
    pub items: usize,
    #[serde(rename = "#actions")]
    pub actions: usize,
    #[serde(rename = "avg.length")]
    pub avg_length: f64,
    pub sparsity: f64,
}

impl DatasetStats {
    /// `avg.length` to one decimal and sparsity as a percentage to two.
    pub fn table_row(&self, name: &str) -> String {
        format!(
            "{name}\t{}\t{}\t{}\t{:.1}\t{:.2}%",
            self.users,
            self.items,
            self.actions,
            self.avg_length,
            self.sparsity * 100.0
        )
    }
}

pub fn stats(splits: &DatasetSplits) -> DatasetStats {
    let users = splits.catalog.n_users();
    let items = splits.catalog.n_items();
    let actions = splits.actions;
    let avg_length = if users == 0 {
        0.0
    } else {
        actions as f64 / users as f64
    };
    let denom = users as f64 * items as f64;
    let sparsity = if denom == 0.0 {
        0.0
    } else {
        1.0 - actions as f64 / denom
    };
    DatasetStats {
        users,
        items,
        actions,
        avg_length,
        sparsity,
    }
}

/// Writes one metadata line followed by one example per line.
pub fn write_examples_jsonl(
    path: &Path,
    examples: &[SequenceExample],
    meta: &Value,
) -> Result<(), DataError> {
    let io = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    let head = serde_json::json!({ "meta": meta });
    writeln!(w, "{head}").map_err(io)?;
    for ex in examples {
        writeln!(w, "{}", serde_json::to_string(ex).expect("serializable")).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_examples_jsonl(
    path: &Path,
) -> Result<(Vec<SequenceExample>, Option<Value>), DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut meta = None;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |detail: String| DataError::BadSplitFile {
            path: path.display().to_string(),
            detail,
        };
        let v: Value =
            serde_json::from_str(&line).map_err(|e| bad(format!("line {}: {e}", i + 1)))?;
        if let Some(m) = v.get("meta") {
            meta = Some(m.clone());
            continue;
        }
        out.push(serde_json::from_value(v).map_err(|e| bad(format!("line {}: {e}", i + 1)))?);
    }
    Ok((out, meta))
}

/// Contents of `catalog.json` in a split directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct SplitMeta {
    meta: Value,
    n_max: usize,
    actions: usize,
    catalog: Catalog,
}

pub const SPLIT_FILES: [&str; 3] = ["train.jsonl", "validation.jsonl", "test.jsonl"];

/// Writes `train.jsonl`, `validation.jsonl`, `test.jsonl` and `catalog.json`
/// into `dir`, each carrying `meta`.
pub fn save_splits(dir: &Path, splits: &DatasetSplits, meta: &Value) -> Result<(), DataError> {
    std::fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    for (name, examples) in
        SPLIT_FILES
            .iter()
            .zip([&splits.train, &splits.validation, &splits.test])
    {
        write_examples_jsonl(&dir.join(name), examples, meta)?;
    }
    let info = SplitMeta {
        meta: meta.clone(),
        n_max: splits.n_max,
        actions: splits.actions,
        catalog: splits.catalog.clone(),
    };
    let path = dir.join("catalog.json");
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&info).expect("serializable"),
    )
    .map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Inverse of [`save_splits`]; returns the splits and the stored metadata.
pub fn load_splits(dir: &Path) -> Result<(DatasetSplits, Value), DataError> {
    let path = dir.join("catalog.json");
    let text = std::fs::read_to_string(&path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut info: SplitMeta = serde_json::from_str(&text).map_err(|e| DataError::BadSplitFile {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    info.catalog.reindex();
    let mut parts = Vec::new();
    for name in SPLIT_FILES {
        let file = dir.join(name);
        let (examples, _) = read_examples_jsonl(&file)?;
        for ex in &examples {
            if ex.items.len() != info.n_max || ex.user >= info.catalog.n_users() {
                return Err(DataError::BadSplitFile {
                    path: file.display().to_string(),
                    detail: format!("example {ex:?} does not match the catalog"),
                });
            }
            ex.validate(info.catalog.n_items())
                .map_err(|e| DataError::BadSplitFile {
                    path: file.display().to_string(),
                    detail: e.to_string(),
                })?;
        }
        parts.push(examples);
    }
    let test = parts.pop().unwrap();
    let validation = parts.pop().unwrap();
    let train = parts.pop().unwrap();
    Ok((
        DatasetSplits {
            train,
            validation,
            test,
            catalog: info.catalog,
            n_max: info.n_max,
            actions: info.actions,
        },
        info.meta,
    ))
}
