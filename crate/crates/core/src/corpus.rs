//! Dataset parsing, validation, label vocabulary, and stratified splits.
//!
//! The canonical record schema has fields `text`, `label_a`, `label_b`
//! (case-insensitive on input) plus an optional `id`. Documents without
//! an input id get a stable content-hash-derived one.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Class name reserved for human-written documents.
pub const HUMAN_LABEL: &str = "Human";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed record at line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("label_a must be 0 or 1, got {value:?} at line {line}")]
    InvalidLabelA { line: u64, value: String },
    #[error("label constraints violated for {0} document(s): {1}", ids.len(), ids.join(", "))]
    LabelInconsistency { ids: Vec<String> },
    #[error("empty corpus: no labeled documents")]
    EmptyCorpus,
    #[error("{0} unlabeled document(s) where labels are required: {1}", ids.len(), ids.join(", "))]
    UnlabeledDocuments { ids: Vec<String> },
    #[error("invalid split spec: {0}")]
    InvalidSplit(String),
    #[error("document {id}: {message}")]
    InvalidDocument { id: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One text item with optional gold labels for Task A and Task B.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    /// 0 = human-written, 1 = AI-generated.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label_a: Option<u8>,
    /// Generator class name, or "Human".
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label_b: Option<String>,
}

impl Document {
    /// Builds a validated document, deriving the id from the text hash.
    ///
    /// Callers that may hold duplicate texts should go through
    /// [`parse_dataset`], which disambiguates repeated hashes.
    pub fn new(
        text: impl Into<String>,
        label_a: Option<u8>,
        label_b: Option<&str>,
    ) -> Result<Self, CorpusError> {
        let text = text.into().trim().to_string();
        let id = content_id(&text);
        Self::with_id(id, text, label_a, label_b)
    }

    /// Builds a validated document with an explicit id.
    pub fn with_id(
        id: impl Into<String>,
        text: impl Into<String>,
        label_a: Option<u8>,
        label_b: Option<&str>,
    ) -> Result<Self, CorpusError> {
        let id = id.into();
        let text = text.into().trim().to_string();
        if text.is_empty() {
            return Err(CorpusError::InvalidDocument {
                id,
                message: "text is empty after trimming".into(),
            });
        }
        if let Some(a) = label_a {
            if a > 1 {
                return Err(CorpusError::InvalidLabelA { line: 0, value: a.to_string() });
            }
        }
        let label_b = label_b.map(normalize_label);
        let doc = Document { id, text, label_a, label_b };
        if !doc.labels_consistent() {
            return Err(CorpusError::LabelInconsistency { ids: vec![doc.id] });
        }
        Ok(doc)
    }

    /// True when the (label_a, label_b) pair satisfies the cascade schema:
    /// human rows may only carry "Human", AI rows may not.
    pub fn labels_consistent(&self) -> bool {
        match (self.label_a, self.label_b.as_deref()) {
            (Some(0), Some(b)) => b == HUMAN_LABEL,
            (Some(1), Some(b)) => b != HUMAN_LABEL,
            _ => true,
        }
    }

    pub fn is_labeled(&self) -> bool {
        self.label_a.is_some()
    }
}

/// Derives a stable id from the document text.
pub fn content_id(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    hex::encode(&digest[..8])
}

/// Trims a raw Task B label and collapses internal line wraps, so a
/// table-wrapped "Gemma-2-\n9B" reads back as "Gemma-2-9B".
pub fn normalize_label(raw: &str) -> String {
    let trimmed = raw.trim();
    let mut out = String::with_capacity(trimmed.len());
    let mut chars = trimmed.chars().peekable();
    while let Some(c) = chars.next() {
        if c == '\n' || c == '\r' {
            while out.ends_with(' ') || out.ends_with('\t') {
                out.pop();
            }
            while matches!(chars.peek(), Some(' ' | '\t' | '\n' | '\r')) {
                chars.next();
            }
        } else {
            out.push(c);
        }
    }
    out
}

/// Ordered set of Task B class names. "Human" is always present, first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVocabulary {
    classes: Vec<String>,
    human_index: usize,
}

impl LabelVocabulary {
    /// Builds the vocabulary from labeled documents:
    /// {"Human"} ∪ {distinct label_b of AI documents}, "Human" first,
    /// the rest sorted. Order-insensitive in the input.
    pub fn build(docs: &[Document]) -> Result<Self, CorpusError> {
        if !docs.iter().any(Document::is_labeled) {
            return Err(CorpusError::EmptyCorpus);
        }
        let generators: BTreeSet<&str> = docs
            .iter()
            .filter(|d| d.label_a == Some(1))
            .filter_map(|d| d.label_b.as_deref())
            .filter(|b| *b != HUMAN_LABEL)
            .collect();
        let mut classes = vec![HUMAN_LABEL.to_string()];
        classes.extend(generators.into_iter().map(String::from));
        Ok(LabelVocabulary { classes, human_index: 0 })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn human_index(&self) -> usize {
        self.human_index
    }

    /// Generator class names, i.e. every class except "Human".
    pub fn generator_classes(&self) -> &[String] {
        &self.classes[1..]
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn index_of(&self, class: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == class)
    }

    /// Position of `class` within the generator classes (Task B head output
    /// order). "Human" has no generator index.
    pub fn generator_index(&self, class: &str) -> Option<usize> {
        self.generator_classes().iter().position(|c| c == class)
    }
}

/// Dataset file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Csv,
    Jsonl,
}

impl DatasetFormat {
    /// Guesses the format from a file extension, defaulting to JSONL.
    pub fn from_path(path: &Path) -> DatasetFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => DatasetFormat::Csv,
            _ => DatasetFormat::Jsonl,
        }
    }
}

/// Parses a dataset stream into validated documents, in input order.
///
/// Label columns may be absent (unlabeled test data). Label constraint
/// violations are collected across the whole stream and reported together.
pub fn parse_dataset<R: Read>(
    reader: R,
    format: DatasetFormat,
) -> Result<Vec<Document>, CorpusError> {
    let raw = match format {
        DatasetFormat::Csv => parse_csv(reader)?,
        DatasetFormat::Jsonl => parse_jsonl(reader)?,
    };
    finalize_records(raw)
}

/// Convenience wrapper: open `path` and parse it, inferring the format
/// from the extension.
pub fn parse_dataset_path(path: &Path) -> Result<Vec<Document>, CorpusError> {
    let file = std::fs::File::open(path)?;
    parse_dataset(BufReader::new(file), DatasetFormat::from_path(path))
}

struct RawRecord {
    line: u64,
    id: Option<String>,
    text: String,
    label_a: Option<u8>,
    label_b: Option<String>,
}

fn parse_label_a(value: &str, line: u64) -> Result<Option<u8>, CorpusError> {
    let value = value.trim();
    if value.is_empty() {
        return Ok(None);
    }
    match value {
        "0" => Ok(Some(0)),
        "1" => Ok(Some(1)),
        other => Err(CorpusError::InvalidLabelA { line, value: other.to_string() }),
    }
}

fn parse_csv<R: Read>(reader: R) -> Result<Vec<RawRecord>, CorpusError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| CorpusError::Malformed { line: 1, message: e.to_string() })?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(name))
    };
    let text_col = col("text").ok_or(CorpusError::Malformed {
        line: 1,
        message: "missing required column `text`".into(),
    })?;
    let label_a_col = col("label_a");
    let label_b_col = col("label_b");
    let id_col = col("id");

    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| CorpusError::Malformed {
            line: e.position().map_or(0, csv::Position::line),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, csv::Position::line);
        let cell = |idx: Option<usize>| idx.and_then(|i| record.get(i)).unwrap_or("");
        let text = record.get(text_col).unwrap_or("").to_string();
        let label_a = parse_label_a(cell(label_a_col), line)?;
        let label_b = match cell(label_b_col).trim() {
            "" => None,
            s => Some(normalize_label(s)),
        };
        let id = match cell(id_col).trim() {
            "" => None,
            s => Some(s.to_string()),
        };
        out.push(RawRecord { line, id, text, label_a, label_b });
    }
    Ok(out)
}

fn parse_jsonl<R: Read>(reader: R) -> Result<Vec<RawRecord>, CorpusError> {
    let reader = BufReader::new(reader);
    let mut out = Vec::new();
    for (idx, line_result) in reader.lines().enumerate() {
        let line_no = idx as u64 + 1;
        let line = line_result.map_err(|e| CorpusError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
        let obj = value.as_object().ok_or(CorpusError::Malformed {
            line: line_no,
            message: "expected a JSON object".into(),
        })?;
        // Field names are matched case-insensitively.
        let field = |name: &str| {
            obj.iter()
                .find(|(k, _)| k.eq_ignore_ascii_case(name))
                .map(|(_, v)| v)
        };
        let text = match field("text") {
            Some(serde_json::Value::String(s)) => s.clone(),
            Some(other) => {
                return Err(CorpusError::Malformed {
                    line: line_no,
                    message: format!("`text` must be a string, got {other}"),
                })
            }
            None => {
                return Err(CorpusError::Malformed {
                    line: line_no,
                    message: "missing required field `text`".into(),
                })
            }
        };
        let label_a = match field("label_a") {
            None | Some(serde_json::Value::Null) => None,
            Some(serde_json::Value::Number(n)) => {
                parse_label_a(&n.to_string(), line_no)?
            }
            Some(serde_json::Value::String(s)) => parse_label_a(s, line_no)?,
            Some(other) => {
                return Err(CorpusError::InvalidLabelA {
                    line: line_no,
                    value: other.to_string(),
                })
            }
        };
        let label_b = match field("label_b") {
            None | Some(serde_json::Value::Null) => None,
            Some(serde_json::Value::String(s)) if s.trim().is_empty() => None,
            Some(serde_json::Value::String(s)) => Some(normalize_label(s)),
            Some(other) => {
                return Err(CorpusError::Malformed {
                    line: line_no,
                    message: format!("`label_b` must be a string, got {other}"),
                })
            }
        };
        let id = match field("id") {
            None | Some(serde_json::Value::Null) => None,
            Some(serde_json::Value::String(s)) if s.trim().is_empty() => None,
            Some(serde_json::Value::String(s)) => Some(s.trim().to_string()),
            Some(other) => {
                return Err(CorpusError::Malformed {
                    line: line_no,
                    message: format!("`id` must be a string, got {other}"),
                })
            }
        };
        out.push(RawRecord { line: line_no, id, text, label_a, label_b });
    }
    Ok(out)
}

/// Trims texts, assigns ids (hash-derived, disambiguated for duplicate
/// texts), and runs the cross-record validation pass.
fn finalize_records(raw: Vec<RawRecord>) -> Result<Vec<Document>, CorpusError> {
    let mut seen_ids: HashMap<String, u64> = HashMap::new();
    let mut docs = Vec::with_capacity(raw.len());
    let mut inconsistent: Vec<String> = Vec::new();

    for rec in raw {
        let text = rec.text.trim().to_string();
        if text.is_empty() {
            return Err(CorpusError::Malformed {
                line: rec.line,
                message: "text is empty after trimming".into(),
            });
        }
        let id = match rec.id {
            Some(explicit) => {
                if seen_ids.contains_key(&explicit) {
                    return Err(CorpusError::Malformed {
                        line: rec.line,
                        message: format!("duplicate id {explicit:?}"),
                    });
                }
                seen_ids.insert(explicit.clone(), 1);
                explicit
            }
            None => {
                let base = content_id(&text);
                let count = seen_ids.entry(base.clone()).or_insert(0);
                *count += 1;
                if *count == 1 {
                    base
                } else {
                    format!("{base}-{count}")
                }
            }
        };
        let doc = Document { id, text, label_a: rec.label_a, label_b: rec.label_b };
        if !doc.labels_consistent() {
            inconsistent.push(doc.id.clone());
        }
        docs.push(doc);
    }

    if !inconsistent.is_empty() {
        return Err(CorpusError::LabelInconsistency { ids: inconsistent });
    }
    Ok(docs)
}

/// Writes documents as canonical JSONL (one object per line, UTF-8).
pub fn write_jsonl<W: Write>(docs: &[Document], mut writer: W) -> Result<(), CorpusError> {
    for doc in docs {
        let line = serde_json::to_string(doc).expect("document serializes");
        writeln!(writer, "{line}")?;
    }
    Ok(())
}

/// Writes documents as canonical CSV with RFC-4180 quoting.
pub fn write_csv<W: Write>(docs: &[Document], writer: W) -> Result<(), CorpusError> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["id", "text", "label_a", "label_b"])
        .map_err(|e| CorpusError::Malformed { line: 0, message: e.to_string() })?;
    for doc in docs {
        let label_a = doc.label_a.map(|a| a.to_string()).unwrap_or_default();
        let label_b = doc.label_b.clone().unwrap_or_default();
        wtr.write_record([doc.id.as_str(), doc.text.as_str(), &label_a, &label_b])
            .map_err(|e| CorpusError::Malformed { line: 0, message: e.to_string() })?;
    }
    wtr.flush()?;
    Ok(())
}

/// Split fractions and the seed that makes the split reproducible.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(
        train_fraction: f64,
        val_fraction: f64,
        test_fraction: f64,
        seed: u64,
    ) -> Result<Self, CorpusError> {
        for (name, f) in [
            ("train", train_fraction),
            ("val", val_fraction),
            ("test", test_fraction),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return Err(CorpusError::InvalidSplit(format!(
                    "{name} fraction {f} must lie in (0, 1)"
                )));
            }
        }
        let sum = train_fraction + val_fraction + test_fraction;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CorpusError::InvalidSplit(format!(
                "fractions sum to {sum}, expected 1"
            )));
        }
        Ok(SplitSpec { train_fraction, val_fraction, test_fraction, seed })
    }

    fn fractions(&self) -> [f64; 3] {
        [self.train_fraction, self.val_fraction, self.test_fraction]
    }
}

/// Result of a stratified split. `warnings` records classes too small to
/// stratify (they fall back to a pooled global shuffle).
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Vec<Document>,
    pub val: Vec<Document>,
    pub test: Vec<Document>,
    pub warnings: Vec<String>,
}

const MIN_STRATUM: usize = 3;

/// Partitions labeled documents into train/val/test, stratified per class.
///
/// Per-class counts stay within ±1 document of the exact fractional
/// targets (largest-remainder allocation). Identical seed and input give
/// an identical partition.
pub fn split_stratified(docs: &[Document], spec: &SplitSpec) -> Result<Split, CorpusError> {
    let unlabeled: Vec<String> = docs
        .iter()
        .filter(|d| !d.is_labeled())
        .map(|d| d.id.clone())
        .collect();
    if !unlabeled.is_empty() {
        return Err(CorpusError::UnlabeledDocuments { ids: unlabeled });
    }

    // Group by the finest available class: label_b, else Human/AI from label_a.
    let mut groups: BTreeMap<String, Vec<&Document>> = BTreeMap::new();
    for doc in docs {
        let key = doc
            .label_b
            .clone()
            .unwrap_or_else(|| if doc.label_a == Some(0) { HUMAN_LABEL.into() } else { "AI".into() });
        groups.entry(key).or_default().push(doc);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut split = Split { train: Vec::new(), val: Vec::new(), test: Vec::new(), warnings: Vec::new() };
    let mut pooled: Vec<&Document> = Vec::new();

    for (class, members) in &groups {
        if members.len() < MIN_STRATUM {
            let warning = format!(
                "class {class:?} has {} member(s), fewer than {MIN_STRATUM}; falling back to global shuffle",
                members.len()
            );
            log::warn!("{warning}");
            split.warnings.push(warning);
            pooled.extend(members.iter().copied());
        } else {
            allocate(members, spec, &mut rng, &mut split);
        }
    }
    if !pooled.is_empty() {
        allocate(&pooled, spec, &mut rng, &mut split);
    }
    Ok(split)
}

/// Shuffles one stratum and deals it out by largest-remainder counts.
fn allocate(members: &[&Document], spec: &SplitSpec, rng: &mut ChaCha8Rng, split: &mut Split) {
    let mut shuffled: Vec<&Document> = members.to_vec();
    shuffled.shuffle(rng);
    let counts = largest_remainder(shuffled.len(), spec.fractions());
    let (train, rest) = shuffled.split_at(counts[0]);
    let (val, test) = rest.split_at(counts[1]);
    split.train.extend(train.iter().map(|d| (*d).clone()));
    split.val.extend(val.iter().map(|d| (*d).clone()));
    split.test.extend(test.iter().map(|d| (*d).clone()));
}

/// Integer allocation of `n` items to fractions: floor the exact targets,
/// then hand the leftovers to the largest fractional parts (ties go to the
/// earlier split).
fn largest_remainder(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let targets: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = targets.iter().map(|t| t.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = targets[a] - targets[a].floor();
        let rb = targets[b] - targets[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(n - assigned) {
        counts[i] += 1;
    }
    [counts[0], counts[1], counts[2]]
}
