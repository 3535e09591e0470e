//! Feature schema, CSV ingestion, field-wise index encoding, time-ordered
//! splitting and batching.
//!
//! A field's one-hot block is carried as a single vocabulary index (a list of
//! indices for behavior sequences); embedding lookup of an index equals the
//! one-hot product with the table. Index 0 of every vocabulary is reserved for
//! out-of-vocabulary values.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CtrlError, Result};

pub const LABEL_COLUMN: &str = "label";
pub const TIMESTAMP_COLUMN: &str = "timestamp";
/// In-cell separator between behaviors of a sequence field.
pub const SEQ_SEPARATOR: char = '|';
pub const OOV_INDEX: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Categorical,
    Sequence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    User,
    Item,
    Context,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
    pub side: Side,
    /// Natural-language lead-in replacing "`name` is" in the descriptive
    /// prompt, e.g. "who has recently watched".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phrase: Option<String>,
    /// Whether the field is rendered into prompts. Wide schemas can keep a
    /// subset of informative fields in the text while every field still feeds
    /// the collaborative tower.
    #[serde(default = "yes", skip_serializing_if = "is_true")]
    pub in_prompt: bool,
    /// Fitted values; value `vocabulary[i]` has index `i + 1`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub vocabulary: Vec<String>,
}

fn yes() -> bool {
    true
}

fn is_true(b: &bool) -> bool {
    *b
}

impl FieldSpec {
    pub fn new(name: impl Into<String>, kind: FieldKind, side: Side) -> Self {
        Self {
            name: name.into(),
            kind,
            side,
            phrase: None,
            in_prompt: true,
            vocabulary: Vec::new(),
        }
    }

    pub fn with_phrase(mut self, phrase: impl Into<String>) -> Self {
        self.phrase = Some(phrase.into());
        self
    }

    /// Vocabulary size including the reserved out-of-vocabulary slot.
    pub fn vocab_size(&self) -> usize {
        self.vocabulary.len() + 1
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSchema {
    pub fields: Vec<FieldSpec>,
    #[serde(default = "default_user_noun")]
    pub user_noun: String,
    #[serde(default = "default_item_noun")]
    pub item_noun: String,
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
    #[serde(skip)]
    lookup: Vec<HashMap<String, usize>>,
}

impl PartialEq for FeatureSchema {
    fn eq(&self, other: &Self) -> bool {
        self.fields == other.fields
            && self.user_noun == other.user_noun
            && self.item_noun == other.item_noun
            && self.max_seq_len == other.max_seq_len
    }
}

fn default_user_noun() -> String {
    "user".into()
}

fn default_item_noun() -> String {
    "item".into()
}

fn default_max_seq_len() -> usize {
    10
}

impl FeatureSchema {
    pub fn new(fields: Vec<FieldSpec>) -> Result<Self> {
        let mut s = Self {
            fields,
            user_noun: default_user_noun(),
            item_noun: default_item_noun(),
            max_seq_len: default_max_seq_len(),
            lookup: Vec::new(),
        };
        s.validate()?;
        s.rebuild_lookup();
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut s: Self = serde_json::from_str(text).map_err(|e| CtrlError::Schema(e.to_string()))?;
        s.validate()?;
        s.rebuild_lookup();
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CtrlError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| CtrlError::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.fields.is_empty() {
            return Err(CtrlError::Schema("no fields".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for f in &self.fields {
            if f.name.trim().is_empty() {
                return Err(CtrlError::Schema("empty field name".into()));
            }
            if f.name == LABEL_COLUMN || f.name == TIMESTAMP_COLUMN {
                return Err(CtrlError::Schema(format!("`{}` is a reserved column", f.name)));
            }
            if !seen.insert(f.name.as_str()) {
                return Err(CtrlError::Schema(format!("duplicate field `{}`", f.name)));
            }
            let mut vs = std::collections::HashSet::new();
            if let Some(dup) = f.vocabulary.iter().find(|v| !vs.insert(v.as_str())) {
                return Err(CtrlError::Schema(format!(
                    "field `{}` lists `{dup}` twice in its vocabulary",
                    f.name
                )));
            }
        }
        if !self.fields.iter().any(|f| f.side == Side::User) {
            return Err(CtrlError::Schema("schema needs at least one user-side field".into()));
        }
        if !self.fields.iter().any(|f| f.side == Side::Item) {
            return Err(CtrlError::Schema("schema needs at least one item-side field".into()));
        }
        if self.max_seq_len == 0 {
            return Err(CtrlError::Schema("max_seq_len must be positive".into()));
        }
        Ok(())
    }

    fn rebuild_lookup(&mut self) {
        self.lookup = self
            .fields
            .iter()
            .map(|f| {
                f.vocabulary
                    .iter()
                    .enumerate()
                    .map(|(i, v)| (v.clone(), i + 1))
                    .collect()
            })
            .collect();
    }

    pub fn num_fields(&self) -> usize {
        self.fields.len()
    }

    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }

    /// Index of `value` in field `field`, or [`OOV_INDEX`].
    pub fn encode_value(&self, field: usize, value: &str) -> usize {
        self.lookup[field].get(value).copied().unwrap_or(OOV_INDEX)
    }

    /// Raw string for an index; `None` for the OOV slot.
    pub fn decode_value(&self, field: usize, index: usize) -> Option<&str> {
        index
            .checked_sub(1)
            .and_then(|i| self.fields[field].vocabulary.get(i))
            .map(String::as_str)
    }

    /// Hex SHA-256 of the canonical JSON form (field specs and vocabularies).
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("schema serializes");
        let digest = Sha256::digest(&canonical);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn is_fitted(&self) -> bool {
        self.fields.iter().all(|f| !f.vocabulary.is_empty())
    }

    /// Encodes a raw row against the (fitted) vocabularies.
    pub fn encode(&self, raw: &RawRow) -> TabularInstance {
        let values = raw
            .cells
            .iter()
            .enumerate()
            .map(|(f, cell)| cell.iter().map(|v| self.encode_value(f, v)).collect())
            .collect();
        TabularInstance {
            values,
            raw: raw.cells.clone(),
            label: raw.label,
            timestamp: raw.timestamp,
        }
    }
}

/// One CSV row before vocabulary encoding. Categorical cells hold exactly one
/// value; sequence cells hold the behaviors (most recent last).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawRow {
    pub cells: Vec<Vec<String>>,
    pub label: u8,
    pub timestamp: i64,
}

/// One labeled example: per-field indices plus the raw strings they came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularInstance {
    pub values: Vec<Vec<usize>>,
    pub raw: Vec<Vec<String>>,
    pub label: u8,
    pub timestamp: i64,
}

trait Timestamped {
    fn timestamp(&self) -> i64;
}

impl Timestamped for RawRow {
    fn timestamp(&self) -> i64 {
        self.timestamp
    }
}

impl Timestamped for TabularInstance {
    fn timestamp(&self) -> i64 {
        self.timestamp
    }
}

fn parse_row(schema: &FeatureSchema, record: &csv::StringRecord, columns: &[usize], label_col: usize, ts_col: usize, row: usize) -> Result<RawRow> {
    let label = match record.get(label_col).map(str::trim) {
        Some("1") => 1,
        Some("0") => 0,
        other => {
            return Err(CtrlError::at_row(
                row,
                format!("unparsable label {:?}", other.unwrap_or("")),
            ))
        }
    };
    let ts_cell = record.get(ts_col).unwrap_or("").trim();
    let timestamp = ts_cell
        .parse::<i64>()
        .map_err(|_| CtrlError::at_row(row, format!("unparsable timestamp {ts_cell:?}")))?;
    let mut cells = Vec::with_capacity(columns.len());
    for (f, &col) in columns.iter().enumerate() {
        let cell = record
            .get(col)
            .ok_or_else(|| CtrlError::at_row(row, "short row"))?
            .trim();
        let values = match schema.fields[f].kind {
            FieldKind::Categorical => vec![cell.to_string()],
            FieldKind::Sequence => {
                let items: Vec<String> = cell
                    .split(SEQ_SEPARATOR)
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect();
                let skip = items.len().saturating_sub(schema.max_seq_len);
                items.into_iter().skip(skip).collect()
            }
        };
        cells.push(values);
    }
    Ok(RawRow {
        cells,
        label,
        timestamp,
    })
}

/// Reads raw rows. The header must name every schema field plus `label` and
/// `timestamp`; extra columns are ignored.
pub fn read_raw_csv(path: &Path, schema: &FeatureSchema) -> Result<Vec<RawRow>> {
    let text = fs::read_to_string(path).map_err(|e| CtrlError::io(path, e))?;
    parse_raw_csv(&text, schema)
}

pub fn parse_raw_csv(text: &str, schema: &FeatureSchema) -> Result<Vec<RawRow>> {
    if text.trim().is_empty() {
        return Err(CtrlError::data("empty file"));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| CtrlError::at_row(0, e.to_string()))?
        .clone();
    let col = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| CtrlError::at_row(0, format!("missing column `{name}`")))
    };
    let columns = schema
        .fields
        .iter()
        .map(|f| col(&f.name))
        .collect::<Result<Vec<_>>>()?;
    let label_col = col(LABEL_COLUMN)?;
    let ts_col = col(TIMESTAMP_COLUMN)?;

    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // Row numbers are 1-based data rows (header is row 0).
        let row = i + 1;
        let record = record.map_err(|e| CtrlError::at_row(row, e.to_string()))?;
        rows.push(parse_row(schema, &record, &columns, label_col, ts_col, row)?);
    }
    if rows.is_empty() {
        return Err(CtrlError::data("no data rows"));
    }
    log::info!("read {} rows", rows.len());
    Ok(rows)
}

/// Writes raw rows in the same CSV layout `read_raw_csv` accepts.
pub fn write_raw_csv(path: &Path, schema: &FeatureSchema, rows: &[RawRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    let mut header: Vec<&str> = schema.fields.iter().map(|f| f.name.as_str()).collect();
    header.push(LABEL_COLUMN);
    header.push(TIMESTAMP_COLUMN);
    w.write_record(&header).map_err(|e| CtrlError::data(e.to_string()))?;
    for r in rows {
        let mut rec: Vec<String> = r.cells.iter().map(|c| c.join("|")).collect();
        rec.push(r.label.to_string());
        rec.push(r.timestamp.to_string());
        w.write_record(&rec).map_err(|e| CtrlError::data(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CtrlError::data(e.to_string()))?;
    fs::write(path, bytes).map_err(|e| CtrlError::io(path, e))
}

/// Encodes every row of `path` against the schema stored at `schema_path`.
pub fn load_csv(path: &Path, schema_path: &Path) -> Result<(FeatureSchema, Vec<TabularInstance>)> {
    let schema = FeatureSchema::load(schema_path)?;
    let raw = read_raw_csv(path, &schema)?;
    let rows = raw.iter().map(|r| schema.encode(r)).collect();
    Ok((schema, rows))
}

/// Fits first-seen-ordered vocabularies on `train` only.
pub fn build_vocab(train: &[RawRow], schema: &FeatureSchema) -> Result<FeatureSchema> {
    if train.is_empty() {
        return Err(CtrlError::data("cannot fit vocabularies on an empty training split"));
    }
    let mut fitted = schema.clone();
    for (f, field) in fitted.fields.iter_mut().enumerate() {
        let mut seen: std::collections::HashSet<String> = std::collections::HashSet::new();
        field.vocabulary.clear();
        for row in train {
            for v in &row.cells[f] {
                if seen.insert(v.clone()) {
                    field.vocabulary.push(v.clone());
                }
            }
        }
    }
    fitted.validate()?;
    fitted.rebuild_lookup();
    Ok(fitted)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    /// Reject specs whose test share is empty.
    pub require_test: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 8.0,
            val: 1.0,
            test: 1.0,
            require_test: true,
        }
    }
}

pub const MIN_SPLIT_ROWS: usize = 10;

/// Stable sort by timestamp, then contiguous cut: earliest rows train.
pub fn split_by_time<T: Clone + SplitKey>(rows: &[T], spec: &SplitSpec) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let ratios = [spec.train, spec.val, spec.test];
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || spec.train <= 0.0 {
        return Err(CtrlError::Config(format!("invalid split ratios {ratios:?}")));
    }
    if spec.require_test && spec.test <= 0.0 {
        return Err(CtrlError::Config("evaluation requested but the test ratio is zero".into()));
    }
    if rows.len() < MIN_SPLIT_ROWS {
        return Err(CtrlError::data(format!(
            "need at least {MIN_SPLIT_ROWS} rows to split, got {}",
            rows.len()
        )));
    }
    let mut sorted = rows.to_vec();
    sorted.sort_by_key(|r| r.split_key());
    let total: f64 = ratios.iter().sum();
    let n = sorted.len();
    let n_train = ((n as f64) * spec.train / total).floor() as usize;
    let n_val = ((n as f64) * spec.val / total).floor() as usize;
    let n_train = n_train.max(1);
    let n_val = n_val.min(n - n_train);
    let test = sorted.split_off(n_train + n_val);
    let val = sorted.split_off(n_train);
    if spec.require_test && test.is_empty() {
        return Err(CtrlError::data("test split is empty"));
    }
    Ok((sorted, val, test))
}

/// Ordering key for time splits.
pub trait SplitKey {
    fn split_key(&self) -> i64;
}

impl<T: Timestamped> SplitKey for T {
    fn split_key(&self) -> i64 {
        self.timestamp()
    }
}

/// Batching policy for the two training stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchMode {
    /// Contrastive stage: shuffled, drop the final partial batch, N >= 2.
    Align,
    /// Supervised training: shuffled, keep the final partial batch.
    Train,
    /// Evaluation: dataset order, keep the final partial batch.
    Eval,
}

/// Row-index batches for one pass over a split.
pub fn batch_indices(n_rows: usize, batch_size: usize, mode: BatchMode, shuffle_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(CtrlError::Config("batch size must be positive".into()));
    }
    if mode == BatchMode::Align && batch_size < 2 {
        return Err(CtrlError::Config(
            "alignment batches need at least 2 rows for in-batch negatives".into(),
        ));
    }
    let mut order: Vec<usize> = (0..n_rows).collect();
    if mode != BatchMode::Eval {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    }
    let drop_last = mode == BatchMode::Align;
    Ok(order
        .chunks(batch_size)
        .filter(|c| !drop_last || c.len() == batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

/// Encoded column for one field of a batch.
#[derive(Clone, Debug, PartialEq)]
pub enum FieldColumn {
    Single(Vec<usize>),
    /// Row-major `[N, max_len]` indices padded with 0; `mask` is 1 on real
    /// positions.
    Sequence {
        indices: Vec<usize>,
        mask: Vec<f64>,
        max_len: usize,
    },
}

/// Stacked encoded fields and labels for a set of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub row_ids: Vec<usize>,
    pub fields: Vec<FieldColumn>,
    pub labels: Vec<f64>,
}

impl Batch {
    pub fn gather(schema: &FeatureSchema, rows: &[TabularInstance], ids: &[usize]) -> Result<Self> {
        if ids.is_empty() {
            return Err(CtrlError::data("empty batch"));
        }
        let mut fields = Vec::with_capacity(schema.num_fields());
        for (f, spec) in schema.fields.iter().enumerate() {
            let col = match spec.kind {
                FieldKind::Categorical => FieldColumn::Single(
                    ids.iter()
                        .map(|&i| rows[i].values[f].first().copied().unwrap_or(OOV_INDEX))
                        .collect(),
                ),
                FieldKind::Sequence => {
                    let max_len = ids
                        .iter()
                        .map(|&i| rows[i].values[f].len())
                        .max()
                        .unwrap_or(0)
                        .max(1);
                    let mut indices = vec![OOV_INDEX; ids.len() * max_len];
                    let mut mask = vec![0.0; ids.len() * max_len];
                    for (r, &i) in ids.iter().enumerate() {
                        for (k, &v) in rows[i].values[f].iter().enumerate() {
                            indices[r * max_len + k] = v;
                            mask[r * max_len + k] = 1.0;
                        }
                    }
                    FieldColumn::Sequence {
                        indices,
                        mask,
                        max_len,
                    }
                }
            };
            fields.push(col);
        }
        Ok(Self {
            row_ids: ids.to_vec(),
            fields,
            labels: ids.iter().map(|&i| f64::from(rows[i].label)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.row_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.row_ids.is_empty()
    }
}

/// Output of the preparation pipeline: fitted schema plus encoded splits.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PreparedData {
    pub train: Vec<TabularInstance>,
    pub val: Vec<TabularInstance>,
    pub test: Vec<TabularInstance>,
}

impl PreparedData {
    /// Split raw rows by time, fit vocabularies on train, encode all splits.
    pub fn from_raw(raw: &[RawRow], schema: &FeatureSchema, split: &SplitSpec) -> Result<(FeatureSchema, Self)> {
        let (train, val, test) = split_by_time(raw, split)?;
        let fitted = build_vocab(&train, schema)?;
        let enc = |rows: &[RawRow]| rows.iter().map(|r| fitted.encode(r)).collect();
        let data = Self {
            train: enc(&train),
            val: enc(&val),
            test: enc(&test),
        };
        Ok((fitted, data))
    }

    pub fn split(&self, name: &str) -> Result<&[TabularInstance]> {
        match name {
            "train" => Ok(&self.train),
            "val" | "validation" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(CtrlError::Config(format!("unknown split `{other}`"))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| CtrlError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CtrlError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn movie_schema() -> FeatureSchema {
        FeatureSchema::new(vec![
            FieldSpec::new("gender", FieldKind::Categorical, Side::User),
            FieldSpec::new("history", FieldKind::Sequence, Side::User),
            FieldSpec::new("title", FieldKind::Categorical, Side::Item),
        ])
        .unwrap()
    }

    const CSV: &str = "gender,history,title,label,timestamp\n\
        male,Titanic|Avatar,Alien,1,3\n\
        female,Avatar,Heat,0,1\n\
        male,,Alien,0,2\n";

    #[test]
    fn parses_sequences_labels_and_oov() {
        let schema = movie_schema();
        let raw = parse_raw_csv(CSV, &schema).unwrap();
        assert_eq!(raw.len(), 3);
        assert_eq!(raw[0].cells[1], vec!["Titanic", "Avatar"]);
        assert!(raw[2].cells[1].is_empty());
        assert_eq!(raw[0].label, 1);

        let fitted = build_vocab(&raw, &schema).unwrap();
        assert_eq!(fitted.fields[0].vocab_size(), 3);
        let row = RawRow {
            cells: vec![vec!["Zzz".into()], vec!["Avatar".into()], vec!["Alien".into()]],
            label: 0,
            timestamp: 9,
        };
        let enc = fitted.encode(&row);
        assert_eq!(enc.values[0], vec![OOV_INDEX]);
        assert_eq!(enc.values[1], vec![2]);
    }

    #[test]
    fn single_value_column_has_two_slots() {
        let schema = movie_schema();
        let raw = parse_raw_csv("gender,history,title,label,timestamp\nx,a,t,1,1\nx,b,t,0,2\n", &schema).unwrap();
        let fitted = build_vocab(&raw, &schema).unwrap();
        assert_eq!(fitted.fields[0].vocab_size(), 2);
    }

    #[test]
    fn structured_csv_errors() {
        let schema = movie_schema();
        let err = parse_raw_csv("gender,title,label,timestamp\nm,t,1,1\n", &schema).unwrap_err();
        assert!(err.to_string().contains("missing column `history`"), "{err}");
        let err = parse_raw_csv("gender,history,title,label,timestamp\nm,a,t,yes,1\n", &schema).unwrap_err();
        assert!(err.to_string().contains("row 1"), "{err}");
        assert!(parse_raw_csv("", &schema).is_err());
        assert!(build_vocab(&[], &schema).is_err());
    }

    #[test]
    fn sequences_keep_most_recent() {
        let mut schema = movie_schema();
        schema.max_seq_len = 2;
        let raw = parse_raw_csv("gender,history,title,label,timestamp\nm,a|b|c,t,1,1\n", &schema).unwrap();
        assert_eq!(raw[0].cells[1], vec!["b", "c"]);
    }

    #[test]
    fn schema_requires_both_sides_and_unique_names() {
        let only_user = FeatureSchema::new(vec![FieldSpec::new("a", FieldKind::Categorical, Side::User)]);
        assert!(only_user.is_err());
        let dup = FeatureSchema::new(vec![
            FieldSpec::new("a", FieldKind::Categorical, Side::User),
            FieldSpec::new("a", FieldKind::Categorical, Side::Item),
        ]);
        assert!(dup.is_err());
    }

    #[derive(Clone, Debug, PartialEq)]
    struct Row(i64, usize);

    impl SplitKey for Row {
        fn split_key(&self) -> i64 {
            self.0
        }
    }

    #[test]
    fn ten_rows_split_eight_one_one() {
        let rows: Vec<Row> = (1..=10).rev().map(|t| Row(t, t as usize)).collect();
        let (tr, va, te) = split_by_time(&rows, &SplitSpec::default()).unwrap();
        assert_eq!(tr.iter().map(|r| r.0).collect::<Vec<_>>(), (1..=8).collect::<Vec<_>>());
        assert_eq!(va, vec![Row(9, 9)]);
        assert_eq!(te, vec![Row(10, 10)]);
    }

    #[test]
    fn timestamp_ties_keep_input_order() {
        let rows: Vec<Row> = (0..10).map(|i| Row(if i < 5 { 1 } else { 0 }, i)).collect();
        let (tr, _, _) = split_by_time(&rows, &SplitSpec::default()).unwrap();
        let ids: Vec<usize> = tr.iter().map(|r| r.1).collect();
        assert_eq!(ids, vec![5, 6, 7, 8, 9, 0, 1, 2]);
    }

    #[test]
    fn split_preconditions() {
        let rows: Vec<Row> = (0..9).map(|i| Row(i, 0)).collect();
        assert!(split_by_time(&rows, &SplitSpec::default()).is_err());
        let rows: Vec<Row> = (0..20).map(|i| Row(i, 0)).collect();
        let spec = SplitSpec {
            train: 9.0,
            val: 1.0,
            test: 0.0,
            require_test: true,
        };
        assert!(split_by_time(&rows, &spec).is_err());
        let spec = SplitSpec {
            require_test: false,
            ..spec
        };
        let (tr, va, te) = split_by_time(&rows, &spec).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (18, 2, 0));
    }

    #[test]
    fn batch_counts_by_mode() {
        assert_eq!(batch_indices(100, 32, BatchMode::Align, 1).unwrap().len(), 3);
        assert_eq!(batch_indices(100, 32, BatchMode::Eval, 1).unwrap().len(), 4);
        assert_eq!(batch_indices(100, 32, BatchMode::Train, 1).unwrap().len(), 4);
        assert!(batch_indices(100, 1, BatchMode::Align, 1).is_err());
        assert_eq!(
            batch_indices(100, 32, BatchMode::Align, 7).unwrap(),
            batch_indices(100, 32, BatchMode::Align, 7).unwrap()
        );
        assert_ne!(
            batch_indices(100, 32, BatchMode::Align, 7).unwrap(),
            batch_indices(100, 32, BatchMode::Align, 8).unwrap()
        );
    }

    #[test]
    fn gather_pads_sequences() {
        let schema = movie_schema();
        let raw = parse_raw_csv(CSV, &schema).unwrap();
        let fitted = build_vocab(&raw, &schema).unwrap();
        let rows: Vec<_> = raw.iter().map(|r| fitted.encode(r)).collect();
        let b = Batch::gather(&fitted, &rows, &[0, 2]).unwrap();
        assert_eq!(b.labels, vec![1.0, 0.0]);
        match &b.fields[1] {
            FieldColumn::Sequence { indices, mask, max_len } => {
                assert_eq!(*max_len, 2);
                assert_eq!(indices, &vec![1, 2, 0, 0]);
                assert_eq!(mask, &vec![1.0, 1.0, 0.0, 0.0]);
            }
            other => panic!("{other:?}"),
        }
    }
}
