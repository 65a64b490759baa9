//! Labeled text corpora and their CSV / JSONL ingestion.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{OodError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = OodError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" | "dev" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(OodError::Invalid(format!("unknown split tag `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub text: String,
    pub label: usize,
    pub split: Split,
}

/// Records with dense integer labels and train/val/test tags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledCorpus {
    records: Vec<Record>,
    label_names: Vec<String>,
}

impl LabeledCorpus {
    pub fn new(records: Vec<Record>, label_names: Vec<String>) -> Result<Self> {
        if records.is_empty() {
            return Err(OodError::Empty("corpus has no records".into()));
        }
        if let Some(r) = records.iter().find(|r| r.label >= label_names.len()) {
            return Err(OodError::Invalid(format!(
                "label {} outside vocabulary of {} names",
                r.label,
                label_names.len()
            )));
        }
        Ok(Self {
            records,
            label_names,
        })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    pub fn n_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for r in &self.records {
            counts[r.label] += 1;
        }
        counts
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> + '_ {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.label_names.iter().position(|n| n == name)
    }

    /// Same records with every split tag replaced by `split`.
    pub fn retagged(mut self, split: Split) -> Self {
        for r in &mut self.records {
            r.split = split;
        }
        self
    }

    /// Appends the records of `other`, mapping its labels by name.
    pub fn concat(&self, other: &LabeledCorpus) -> LabeledCorpus {
        let mut names = self.label_names.clone();
        let mut records = self.records.clone();
        for r in &other.records {
            let name = &other.label_names[r.label];
            let label = match names.iter().position(|n| n == name) {
                Some(i) => i,
                None => {
                    names.push(name.clone());
                    names.len() - 1
                }
            };
            records.push(Record {
                text: r.text.clone(),
                label,
                split: r.split,
            });
        }
        LabeledCorpus {
            records,
            label_names: names,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    Csv,
    Jsonl,
}

impl TableFormat {
    /// Guesses from the file extension; anything but `.jsonl`/`.json` is CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") | Some("ndjson") => TableFormat::Jsonl,
            _ => TableFormat::Csv,
        }
    }
}

/// How to turn a table into a corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSpec {
    #[serde(default = "default_text_column")]
    pub text_column: String,
    #[serde(default = "default_label_column")]
    pub label_column: String,
    #[serde(default)]
    pub split_column: Option<String>,
    /// Tag used for every record when there is no split column.
    #[serde(default = "default_split")]
    pub default_split: Split,
    /// Label renames applied before the vocabulary is built.
    #[serde(default)]
    pub merge: BTreeMap<String, String>,
    /// Keep only rows whose `column` value is in `allow`.
    #[serde(default)]
    pub filter: Option<ColumnFilter>,
}

fn default_text_column() -> String {
    "text".into()
}

fn default_label_column() -> String {
    "label".into()
}

fn default_split() -> Split {
    Split::Test
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnFilter {
    pub column: String,
    pub allow: Vec<String>,
}

impl Default for TableSpec {
    fn default() -> Self {
        Self {
            text_column: "text".into(),
            label_column: "label".into(),
            split_column: None,
            default_split: Split::Test,
            merge: BTreeMap::new(),
            filter: None,
        }
    }
}

/// A raw row: column name → value.
type Row = HashMap<String, String>;

fn csv_rows<R: Read>(reader: R) -> Result<(Vec<String>, Vec<Row>)> {
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| OodError::Serde(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| OodError::Serde(e.to_string()))?;
        rows.push(
            headers
                .iter()
                .cloned()
                .zip(rec.iter().map(str::to_string))
                .collect(),
        );
    }
    Ok((headers, rows))
}

fn json_value_to_string(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        serde_json::Value::Null => String::new(),
        other => other.to_string(),
    }
}

fn jsonl_rows<R: Read>(reader: R) -> Result<Vec<Row>> {
    let mut rows = Vec::new();
    for (lineno, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| OodError::Serde(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| OodError::Serde(format!("line {}: {e}", lineno + 1)))?;
        let obj = value.as_object().ok_or_else(|| {
            OodError::Serde(format!("line {}: expected a JSON object", lineno + 1))
        })?;
        rows.push(
            obj.iter()
                .map(|(k, v)| (k.clone(), json_value_to_string(v)))
                .collect(),
        );
    }
    Ok(rows)
}

/// Parses CSV (with header) or JSONL text into a corpus.
///
/// Record order follows the input; label ids follow first appearance.
pub fn from_text_table<R: Read>(reader: R, format: TableFormat, spec: &TableSpec) -> Result<LabeledCorpus> {
    let rows = match format {
        TableFormat::Csv => {
            let (headers, rows) = csv_rows(reader)?;
            let mut needed = vec![&spec.text_column, &spec.label_column];
            needed.extend(spec.split_column.as_ref());
            needed.extend(spec.filter.as_ref().map(|f| &f.column));
            if let Some(missing) = needed.into_iter().find(|c| !headers.contains(c)) {
                return Err(OodError::MissingColumn(missing.clone()));
            }
            rows
        }
        TableFormat::Jsonl => jsonl_rows(reader)?,
    };
    if rows.is_empty() {
        return Err(OodError::Empty("table has no rows".into()));
    }

    let column = |row: &Row, name: &str| -> Result<String> {
        row.get(name)
            .cloned()
            .ok_or_else(|| OodError::MissingColumn(name.to_string()))
    };

    let mut label_names: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut records = Vec::with_capacity(rows.len());
    for row in &rows {
        if let Some(f) = &spec.filter {
            if !f.allow.contains(&column(row, &f.column)?) {
                continue;
            }
        }
        let text = column(row, &spec.text_column)?;
        let raw_label = column(row, &spec.label_column)?;
        let label_name = spec.merge.get(&raw_label).cloned().unwrap_or(raw_label);
        let label = *index.entry(label_name.clone()).or_insert_with(|| {
            label_names.push(label_name);
            label_names.len() - 1
        });
        let split = match &spec.split_column {
            Some(col) => column(row, col)?.parse()?,
            None => spec.default_split,
        };
        records.push(Record { text, label, split });
    }
    if records.is_empty() {
        return Err(OodError::Empty("no rows left after filtering".into()));
    }
    LabeledCorpus::new(records, label_names)
}

pub fn read_text_table(path: &Path, format: TableFormat, spec: &TableSpec) -> Result<LabeledCorpus> {
    let file = File::open(path).map_err(|e| OodError::io(path, e))?;
    from_text_table(file, format, spec)
}

/// Writes a corpus as CSV with `text,label,split` columns or as JSONL with
/// the same keys.
pub fn write_text_table<W: Write>(writer: W, corpus: &LabeledCorpus, format: TableFormat) -> Result<()> {
    match format {
        TableFormat::Csv => {
            let mut w = csv::Writer::from_writer(writer);
            w.write_record(["text", "label", "split"])
                .map_err(|e| OodError::Serde(e.to_string()))?;
            for r in corpus.records() {
                w.write_record([
                    r.text.as_str(),
                    corpus.label_names()[r.label].as_str(),
                    r.split.as_str(),
                ])
                .map_err(|e| OodError::Serde(e.to_string()))?;
            }
            w.flush().map_err(|e| OodError::Serde(e.to_string()))
        }
        TableFormat::Jsonl => {
            let mut w = std::io::BufWriter::new(writer);
            for r in corpus.records() {
                let line = serde_json::json!({
                    "text": r.text,
                    "label": corpus.label_names()[r.label],
                    "split": r.split.as_str(),
                });
                writeln!(w, "{line}").map_err(|e| OodError::Serde(e.to_string()))?;
            }
            w.flush().map_err(|e| OodError::Serde(e.to_string()))
        }
    }
}
