use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{DataError, Interaction};

const USER_KEYS: &[&str] = &["user", "user_id", "userId", "reviewerID"];
const ITEM_KEYS: &[&str] = &["item", "item_id", "itemId", "asin"];
const TIME_KEYS: &[&str] = &["timestamp", "time", "unixReviewTime"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Csv,
    Tsv,
    JsonLines,
}

impl Format {
    /// Guess from the file extension; defaults to csv.
    pub fn from_path(path: &Path) -> Format {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
        {
            Some("tsv") | Some("tab") => Format::Tsv,
            Some("jsonl") | Some("json") | Some("ndjson") => Format::JsonLines,
            _ => Format::Csv,
        }
    }
}

impl FromStr for Format {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "tsv" => Ok(Format::Tsv),
            "jsonl" | "json-lines" | "jsonlines" => Ok(Format::JsonLines),
            other => Err(DataError::Invalid(format!(
                "unknown input format '{other}'"
            ))),
        }
    }
}

/// Column positions for delimited input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Columns {
    pub user: usize,
    pub item: usize,
    pub timestamp: usize,
}

impl Default for Columns {
    fn default() -> Self {
        Self {
            user: 0,
            item: 1,
            timestamp: 2,
        }
    }
}

impl Columns {
    /// Parses a comma-separated column list such as `user,item,rating,timestamp`.
    pub fn from_names(spec: &str) -> Result<Columns, DataError> {
        let names: Vec<String> = spec
            .split(',')
            .map(|s| s.trim().to_ascii_lowercase())
            .collect();
        Self::from_header(&names).ok_or_else(|| {
            DataError::Invalid(format!(
                "column list '{spec}' must name user, item and timestamp"
            ))
        })
    }

    fn from_header(fields: &[String]) -> Option<Columns> {
        let find = |keys: &[&str]| {
            fields
                .iter()
                .position(|f| keys.iter().any(|k| k.eq_ignore_ascii_case(f)))
        };
        Some(Columns {
            user: find(USER_KEYS)?,
            item: find(ITEM_KEYS)?,
            timestamp: find(TIME_KEYS)?,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub records: usize,
    pub malformed: usize,
    /// 1-based line numbers of the first few malformed lines.
    pub malformed_lines: Vec<usize>,
}

impl IngestReport {
    fn reject(&mut self, line: usize) {
        self.malformed += 1;
        if self.malformed_lines.len() < 20 {
            self.malformed_lines.push(line);
        }
    }
}

/// Reads an interaction log. Malformed records are skipped and counted.
pub fn ingest(
    path: &Path,
    format: Format,
    columns: Option<Columns>,
) -> Result<(Vec<Interaction>, IngestReport), DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ingest_str(&text, format, columns)
}

pub fn ingest_str(
    text: &str,
    format: Format,
    columns: Option<Columns>,
) -> Result<(Vec<Interaction>, IngestReport), DataError> {
    let mut report = IngestReport::default();
    let out = match format {
        Format::JsonLines => parse_jsonl(text, &mut report),
        Format::Csv => parse_delimited(text, b',', columns, &mut report),
        Format::Tsv => parse_delimited(text, b'\t', columns, &mut report),
    };
    report.records = out.len();
    if out.is_empty() {
        return Err(DataError::NoRecords {
            malformed: report.malformed,
        });
    }
    Ok((out, report))
}

fn valid_timestamp(s: &str) -> Option<i64> {
    s.trim().parse::<i64>().ok().filter(|t| *t >= 0)
}

fn parse_delimited(
    text: &str,
    delim: u8,
    columns: Option<Columns>,
    report: &mut IngestReport,
) -> Vec<Interaction> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .delimiter(delim)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut cols = columns;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 1;
        let Ok(rec) = rec else {
            report.reject(line);
            continue;
        };
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        if i == 0 && cols.is_none() {
            let fields: Vec<String> = rec.iter().map(str::to_string).collect();
            if let Some(c) = Columns::from_header(&fields) {
                cols = Some(c);
                continue;
            }
        }
        let c = cols.unwrap_or_default();
        let (Some(user), Some(item), Some(ts)) =
            (rec.get(c.user), rec.get(c.item), rec.get(c.timestamp))
        else {
            report.reject(line);
            continue;
        };
        match valid_timestamp(ts) {
            Some(t) if !user.is_empty() && !item.is_empty() => {
                out.push(Interaction::new(user, item, t))
            }
            _ => report.reject(line),
        }
    }
    out
}

fn field_string(obj: &serde_json::Map<String, Value>, keys: &[&str]) -> Option<String> {
    keys.iter().find_map(|k| match obj.get(*k)? {
        Value::String(s) if !s.is_empty() => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    })
}

fn field_timestamp(obj: &serde_json::Map<String, Value>) -> Option<i64> {
    TIME_KEYS.iter().find_map(|k| match obj.get(*k)? {
        Value::Number(n) => n.as_i64().filter(|t| *t >= 0),
        Value::String(s) => valid_timestamp(s),
        _ => None,
    })
}

fn parse_jsonl(text: &str, report: &mut IngestReport) -> Vec<Interaction> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<Value>(line)
            .ok()
            .and_then(|v| match v {
                Value::Object(obj) => Some((
                    field_string(&obj, USER_KEYS)?,
                    field_string(&obj, ITEM_KEYS)?,
                    field_timestamp(&obj)?,
                )),
                _ => None,
            });
        match parsed {
            Some((u, it, t)) => out.push(Interaction::new(u, it, t)),
            None => report.reject(i + 1),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_line_csv() {
        let (xs, rep) = ingest_str("u1,i1,5\nu1,i2,9\nu2,i1,7", Format::Csv, None).unwrap();
        assert_eq!(xs.len(), 3);
        assert_eq!(xs[1], Interaction::new("u1", "i2", 9));
        assert_eq!(rep.malformed, 0);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(
            ingest_str("", Format::Csv, None),
            Err(DataError::NoRecords { malformed: 0 })
        ));
    }

    #[test]
    fn bad_timestamp_is_skipped_and_counted() {
        let (xs, rep) =
            ingest_str("u1,i1,5\nu1,i2,later\nu2,i1,7\nu3,,4", Format::Csv, None).unwrap();
        assert_eq!(xs.len(), 2);
        assert_eq!(rep.malformed, 2);
        assert_eq!(rep.malformed_lines, vec![2, 4]);
    }

    #[test]
    fn header_selects_columns() {
        let text = "item\trating\tuser\ttimestamp\nA\t5.0\tx\t100\nB\t3.0\ty\t200\n";
        let (xs, rep) = ingest_str(text, Format::Tsv, None).unwrap();
        assert_eq!(
            xs,
            vec![
                Interaction::new("x", "A", 100),
                Interaction::new("y", "B", 200)
            ]
        );
        assert_eq!(rep.malformed, 0);
    }

    #[test]
    fn explicit_columns_for_ratings_files() {
        let cols = Columns::from_names("user,item,rating,timestamp").unwrap();
        let (xs, _) = ingest_str("u,i,5.0,1400000000\n", Format::Csv, Some(cols)).unwrap();
        assert_eq!(xs[0].timestamp, 1_400_000_000);
        assert!(Columns::from_names("user,rating").is_err());
    }

    #[test]
    fn json_lines_with_aliases() {
        let text = r#"{"reviewerID":"A1","asin":"B9","overall":5.0,"unixReviewTime":1234}
{"user":"u2","item":"i2","timestamp":"55"}
not json
{"user":"u3","item":"i3"}"#;
        let (xs, rep) = ingest_str(text, Format::JsonLines, None).unwrap();
        assert_eq!(
            xs,
            vec![
                Interaction::new("A1", "B9", 1234),
                Interaction::new("u2", "i2", 55)
            ]
        );
        assert_eq!(rep.malformed, 2);
    }

    #[test]
    fn negative_timestamp_rejected() {
        assert!(ingest_str("u,i,-3\n", Format::Csv, None).is_err());
    }
}
