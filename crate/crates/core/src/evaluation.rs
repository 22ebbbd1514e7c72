//! Scoring of cascade predictions against gold labels: per-task F1,
//! per-class breakdowns, confusion matrices, and ranked method
//! comparison tables rendered as text and JSON.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::Prediction;
use crate::corpus::{Document, HUMAN_LABEL};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("predictions without a matching gold document: {ids:?}")]
    UnmatchedPredictions { ids: Vec<String> },
    #[error("duplicate predictions for ids: {ids:?}")]
    DuplicatePredictions { ids: Vec<String> },
    #[error("predictions violating the cascade schema (label_b = \"Human\" iff label_a = 0): {ids:?}")]
    InconsistentPredictions { ids: Vec<String> },
    #[error("method table requires at least one report")]
    EmptyReports,
    #[error("malformed prediction record at line {line}")]
    MalformedRecord {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("i/o failure")]
    Io(#[from] std::io::Error),
}

/// Wire form of one prediction: one line of a predictions JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub label_a: u8,
    pub p_ai: f64,
    pub label_b: String,
}

impl From<&Prediction> for PredictionRecord {
    fn from(p: &Prediction) -> Self {
        PredictionRecord {
            id: p.doc_id.clone(),
            label_a: p.label_a,
            p_ai: p.p_ai,
            label_b: p.label_b.clone(),
        }
    }
}

pub fn write_predictions<W: Write>(
    records: &[PredictionRecord],
    mut writer: W,
) -> Result<(), EvalError> {
    for record in records {
        let line = serde_json::to_string(record).expect("prediction record serializes");
        writeln!(writer, "{line}")?;
    }
    Ok(())
}

pub fn read_predictions<R: Read>(reader: R) -> Result<Vec<PredictionRecord>, EvalError> {
    let mut records = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|source| EvalError::MalformedRecord { line: i + 1, source })?;
        records.push(record);
    }
    Ok(records)
}

/// Gold-by-predicted count matrix; rows are gold classes, columns
/// predicted classes, in the shared `classes` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<String>) -> Self {
        let n = classes.len();
        ConfusionMatrix { classes, counts: vec![vec![0; n]; n] }
    }

    pub fn record(&mut self, gold: usize, pred: usize) {
        self.counts[gold][pred] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn col_sum(&self, class: usize) -> u64 {
        self.counts.iter().map(|row| row[class]).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    BinaryPositiveAi,
    Macro,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task_a_f1: f64,
    pub task_b_f1: f64,
    pub task_a_averaging: Averaging,
    pub task_b_averaging: Averaging,
    /// Task B precision/recall/F1 per class, over the full class set.
    pub per_class: BTreeMap<String, ClassMetrics>,
    pub n_scored: usize,
    pub n_skipped_unlabeled: usize,
    pub confusion_a: ConfusionMatrix,
    pub confusion_b: ConfusionMatrix,
    pub metadata: BTreeMap<String, String>,
}

fn ratio(numerator: u64, denominator: u64) -> f64 {
    if denominator == 0 {
        0.0
    } else {
        numerator as f64 / denominator as f64
    }
}

/// Precision/recall/F1 from raw counts; zero denominators score 0.
fn prf(tp: u64, fp: u64, fn_: u64) -> ClassMetrics {
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClassMetrics { precision, recall, f1 }
}

/// Resolves a gold row to its cascade class: human rows score as
/// "Human", AI rows as their generator name. Rows with missing or
/// inconsistent labels resolve to None and are skipped.
fn gold_class(doc: &Document) -> Option<(u8, String)> {
    if !doc.labels_consistent() {
        return None;
    }
    match (doc.label_a, doc.label_b.as_deref()) {
        (Some(0), _) => Some((0, HUMAN_LABEL.to_string())),
        (Some(1), Some(b)) => Some((1, b.to_string())),
        _ => None,
    }
}

/// Scores predictions against gold labels.
///
/// Task A F1 is the F1 of the AI-positive class; Task B F1 is the
/// macro-F1 over the full class set including "Human", treating the
/// cascade output as one C-class prediction. The class set is the
/// union of gold and predicted names, Human first, the rest sorted.
/// Gold rows without usable labels are excluded with a warning count,
/// never silently.
pub fn score(preds: &[PredictionRecord], golds: &[Document]) -> Result<MetricsReport, EvalError> {
    let mut seen = HashSet::new();
    let duplicates: BTreeSet<String> =
        preds.iter().filter(|p| !seen.insert(p.id.as_str())).map(|p| p.id.clone()).collect();
    if !duplicates.is_empty() {
        return Err(EvalError::DuplicatePredictions { ids: duplicates.into_iter().collect() });
    }

    let gold_by_id: HashMap<&str, &Document> = golds.iter().map(|d| (d.id.as_str(), d)).collect();
    let unmatched: Vec<String> = preds
        .iter()
        .filter(|p| !gold_by_id.contains_key(p.id.as_str()))
        .map(|p| p.id.clone())
        .collect();
    if !unmatched.is_empty() {
        return Err(EvalError::UnmatchedPredictions { ids: unmatched });
    }

    let inconsistent: Vec<String> = preds
        .iter()
        .filter(|p| (p.label_b == HUMAN_LABEL) != (p.label_a == 0))
        .map(|p| p.id.clone())
        .collect();
    if !inconsistent.is_empty() {
        return Err(EvalError::InconsistentPredictions { ids: inconsistent });
    }

    let mut scored: Vec<(&PredictionRecord, u8, String)> = Vec::new();
    let mut n_skipped_unlabeled = 0usize;
    for p in preds {
        match gold_class(gold_by_id[p.id.as_str()]) {
            Some((gold_a, class)) => scored.push((p, gold_a, class)),
            None => n_skipped_unlabeled += 1,
        }
    }
    if n_skipped_unlabeled > 0 {
        log::warn!("excluded {n_skipped_unlabeled} predictions whose gold rows are unlabeled");
    }

    let mut names: BTreeSet<String> = BTreeSet::new();
    for (p, _, class) in &scored {
        names.insert(class.clone());
        names.insert(p.label_b.clone());
    }
    names.remove(HUMAN_LABEL);
    let mut classes = vec![HUMAN_LABEL.to_string()];
    classes.extend(names);
    let index: HashMap<&str, usize> =
        classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();

    let mut confusion_a = ConfusionMatrix::new(vec!["human".into(), "ai".into()]);
    let mut confusion_b = ConfusionMatrix::new(classes.clone());
    for (p, gold_a, gold_class) in &scored {
        confusion_a.record(usize::from(*gold_a), usize::from(p.label_a));
        confusion_b.record(index[gold_class.as_str()], index[p.label_b.as_str()]);
    }

    let task_a = prf(
        confusion_a.counts[1][1],
        confusion_a.counts[0][1],
        confusion_a.counts[1][0],
    );

    let mut per_class = BTreeMap::new();
    let mut macro_sum = 0.0;
    for (i, class) in classes.iter().enumerate() {
        let tp = confusion_b.counts[i][i];
        let metrics = prf(tp, confusion_b.col_sum(i) - tp, confusion_b.row_sum(i) - tp);
        macro_sum += metrics.f1;
        per_class.insert(class.clone(), metrics);
    }
    let task_b_f1 = macro_sum / classes.len() as f64;

    Ok(MetricsReport {
        task_a_f1: task_a.f1,
        task_b_f1,
        task_a_averaging: Averaging::BinaryPositiveAi,
        task_b_averaging: Averaging::Macro,
        per_class,
        n_scored: scored.len(),
        n_skipped_unlabeled,
        confusion_a,
        confusion_b,
        metadata: BTreeMap::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub task_a_f1: f64,
    pub task_b_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodTable {
    pub rows: Vec<MethodRow>,
}

/// Ranks methods by Task A F1 descending; ties order by method name.
pub fn method_table(reports: &BTreeMap<String, MetricsReport>) -> Result<MethodTable, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::EmptyReports);
    }
    let mut rows: Vec<MethodRow> = reports
        .iter()
        .map(|(name, r)| MethodRow {
            method: name.clone(),
            task_a_f1: r.task_a_f1,
            task_b_f1: r.task_b_f1,
        })
        .collect();
    rows.sort_by(|x, y| {
        y.task_a_f1
            .partial_cmp(&x.task_a_f1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| x.method.cmp(&y.method))
    });
    Ok(MethodTable { rows })
}

impl MethodTable {
    /// Plain-text render: aligned columns, scores to four decimals.
    pub fn to_text(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.method.len())
            .chain(["Method".len()])
            .max()
            .expect("non-empty");
        let mut out = format!("{:<width$}  Task-A  Task-B\n", "Method");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<width$}  {:>6.4}  {:>6.4}\n",
                r.method, r.task_a_f1, r.task_b_f1
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("method table serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn doc(id: &str, label_a: u8, label_b: &str) -> Document {
        Document::with_id(id, format!("text of {id}"), Some(label_a), Some(label_b)).unwrap()
    }

    fn pred(id: &str, label_a: u8, label_b: &str) -> PredictionRecord {
        let p_ai = if label_a == 1 { 0.9 } else { 0.1 };
        PredictionRecord { id: id.into(), label_a, p_ai, label_b: label_b.into() }
    }

    fn small_gold() -> Vec<Document> {
        vec![
            doc("d1", 1, "Gen-X"),
            doc("d2", 1, "Gen-X"),
            doc("d3", 0, HUMAN_LABEL),
            doc("d4", 0, HUMAN_LABEL),
        ]
    }

    #[test]
    fn perfect_predictions_score_one() {
        let golds = small_gold();
        let preds: Vec<PredictionRecord> = golds
            .iter()
            .map(|d| pred(&d.id, d.label_a.unwrap(), d.label_b.as_deref().unwrap()))
            .collect();
        let report = score(&preds, &golds).unwrap();
        assert_eq!(report.task_a_f1, 1.0);
        assert_eq!(report.task_b_f1, 1.0);
        assert_eq!(report.n_scored, 4);
        assert_eq!(report.n_skipped_unlabeled, 0);
    }

    #[test]
    fn task_a_f1_half_on_crossed_pair() {
        // Gold A = (1,1,0,0), pred A = (1,0,0,1): TP=1, FP=1, FN=1.
        let golds = small_gold();
        let preds = vec![
            pred("d1", 1, "Gen-X"),
            pred("d2", 0, HUMAN_LABEL),
            pred("d3", 0, HUMAN_LABEL),
            pred("d4", 1, "Gen-X"),
        ];
        let report = score(&preds, &golds).unwrap();
        assert_eq!(report.task_a_f1, 0.5);
    }

    #[test]
    fn duplicate_predictions_error() {
        let golds = small_gold();
        let preds = vec![pred("d1", 1, "Gen-X"), pred("d1", 1, "Gen-X")];
        match score(&preds, &golds) {
            Err(EvalError::DuplicatePredictions { ids }) => assert_eq!(ids, vec!["d1"]),
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn unmatched_predictions_error() {
        let golds = small_gold();
        let preds = vec![pred("d1", 1, "Gen-X"), pred("ghost", 0, HUMAN_LABEL)];
        match score(&preds, &golds) {
            Err(EvalError::UnmatchedPredictions { ids }) => assert_eq!(ids, vec!["ghost"]),
            other => panic!("expected unmatched error, got {other:?}"),
        }
    }

    #[test]
    fn cascade_inconsistent_prediction_error() {
        let golds = small_gold();
        let preds = vec![PredictionRecord {
            id: "d1".into(),
            label_a: 1,
            p_ai: 0.9,
            label_b: HUMAN_LABEL.into(),
        }];
        match score(&preds, &golds) {
            Err(EvalError::InconsistentPredictions { ids }) => assert_eq!(ids, vec!["d1"]),
            other => panic!("expected inconsistency error, got {other:?}"),
        }
    }

    #[test]
    fn unlabeled_golds_are_excluded_with_count() {
        let mut golds = small_gold();
        golds.push(Document::with_id("d5", "unlabeled text", None, None).unwrap());
        let mut preds: Vec<PredictionRecord> = small_gold()
            .iter()
            .map(|d| pred(&d.id, d.label_a.unwrap(), d.label_b.as_deref().unwrap()))
            .collect();
        preds.push(pred("d5", 1, "Gen-X"));
        let report = score(&preds, &golds).unwrap();
        assert_eq!(report.n_scored, 4);
        assert_eq!(report.n_skipped_unlabeled, 1);
        assert_eq!(report.task_a_f1, 1.0);
    }

    #[test]
    fn confusion_row_sums_match_gold_counts() {
        let golds = small_gold();
        let preds = vec![
            pred("d1", 1, "Gen-X"),
            pred("d2", 0, HUMAN_LABEL),
            pred("d3", 0, HUMAN_LABEL),
            pred("d4", 1, "Gen-X"),
        ];
        let report = score(&preds, &golds).unwrap();
        let human_row = report
            .confusion_b
            .classes
            .iter()
            .position(|c| c == HUMAN_LABEL)
            .unwrap();
        let gen_row = report.confusion_b.classes.iter().position(|c| c == "Gen-X").unwrap();
        assert_eq!(report.confusion_b.row_sum(human_row), 2);
        assert_eq!(report.confusion_b.row_sum(gen_row), 2);
        assert_eq!(report.confusion_b.total(), 4);
        assert_eq!(report.confusion_a.row_sum(0), 2);
        assert_eq!(report.confusion_a.row_sum(1), 2);
    }

    /// Naive scorer enumerating per-class counts by direct loops,
    /// written independently of `score` as its oracle.
    fn brute_force(preds: &[PredictionRecord], golds: &[Document]) -> (f64, f64) {
        let gold_of = |id: &str| golds.iter().find(|d| d.id == id).unwrap();
        let usable: Vec<&PredictionRecord> =
            preds.iter().filter(|p| gold_class(gold_of(&p.id)).is_some()).collect();

        let mut tp = 0u64;
        let mut fp = 0u64;
        let mut fn_ = 0u64;
        for p in &usable {
            let (gold_a, _) = gold_class(gold_of(&p.id)).unwrap();
            match (gold_a, p.label_a) {
                (1, 1) => tp += 1,
                (0, 1) => fp += 1,
                (1, 0) => fn_ += 1,
                _ => {}
            }
        }
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        let f1_a = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };

        let mut class_set: Vec<String> = Vec::new();
        for p in &usable {
            let (_, gold) = gold_class(gold_of(&p.id)).unwrap();
            for name in [gold.as_str(), p.label_b.as_str()] {
                if !class_set.iter().any(|c| c == name) {
                    class_set.push(name.to_string());
                }
            }
        }
        if !class_set.iter().any(|c| c == HUMAN_LABEL) {
            class_set.push(HUMAN_LABEL.into());
        }
        let mut f1_sum = 0.0;
        for class in &class_set {
            let mut tp = 0u64;
            let mut fp = 0u64;
            let mut fn_ = 0u64;
            for p in &usable {
                let (_, gold) = gold_class(gold_of(&p.id)).unwrap();
                let gold_is = &gold == class;
                let pred_is = &p.label_b == class;
                match (gold_is, pred_is) {
                    (true, true) => tp += 1,
                    (false, true) => fp += 1,
                    (true, false) => fn_ += 1,
                    _ => {}
                }
            }
            let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
            let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
            f1_sum += if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        }
        (f1_a, f1_sum / class_set.len() as f64)
    }

    #[test]
    fn matches_brute_force_scorer_on_random_fixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let generators = ["Gen-A", "Gen-B", "Gen-C"];
        let mut golds = Vec::new();
        let mut preds = Vec::new();
        for i in 0..200 {
            let gold_a = u8::from(rng.random_bool(0.5));
            let gold_b =
                if gold_a == 1 { generators[rng.random_range(0..3)] } else { HUMAN_LABEL };
            golds.push(doc(&format!("d{i}"), gold_a, gold_b));
            let pred_a = u8::from(rng.random_bool(0.5));
            let pred_b =
                if pred_a == 1 { generators[rng.random_range(0..3)] } else { HUMAN_LABEL };
            preds.push(pred(&format!("d{i}"), pred_a, pred_b));
        }
        let report = score(&preds, &golds).unwrap();
        let (f1_a, f1_b) = brute_force(&preds, &golds);
        assert!((report.task_a_f1 - f1_a).abs() < 1e-9);
        assert!((report.task_b_f1 - f1_b).abs() < 1e-9);
    }

    #[test]
    fn method_table_ranks_by_task_a_descending() {
        let golds = small_gold();
        let preds: Vec<PredictionRecord> = golds
            .iter()
            .map(|d| pred(&d.id, d.label_a.unwrap(), d.label_b.as_deref().unwrap()))
            .collect();
        let base = score(&preds, &golds).unwrap();
        let with = |a: f64, b: f64| {
            let mut r = base.clone();
            r.task_a_f1 = a;
            r.task_b_f1 = b;
            r
        };
        let reports = BTreeMap::from([
            ("base-a".to_string(), with(0.672, 0.143)),
            ("base-b".to_string(), with(0.742, 0.249)),
            ("base-a+cot".to_string(), with(0.792, 0.198)),
            ("base-b+cot".to_string(), with(0.898, 0.307)),
        ]);
        let table = method_table(&reports).unwrap();
        let order: Vec<&str> = table.rows.iter().map(|r| r.method.as_str()).collect();
        assert_eq!(order, vec!["base-b+cot", "base-a+cot", "base-b", "base-a"]);
        let text = table.to_text();
        assert!(text.starts_with("Method"));
        assert!(text.contains("0.8980") && text.contains("0.3070"), "{text}");
    }

    #[test]
    fn method_table_breaks_ties_by_name() {
        let golds = small_gold();
        let preds: Vec<PredictionRecord> = golds
            .iter()
            .map(|d| pred(&d.id, d.label_a.unwrap(), d.label_b.as_deref().unwrap()))
            .collect();
        let report = score(&preds, &golds).unwrap();
        let reports = BTreeMap::from([
            ("zeta".to_string(), report.clone()),
            ("alpha".to_string(), report.clone()),
        ]);
        let table = method_table(&reports).unwrap();
        assert_eq!(table.rows[0].method, "alpha");
        assert_eq!(table.rows[1].method, "zeta");
        assert_eq!(method_table(&reports).unwrap(), table);
    }

    #[test]
    fn method_table_single_row_and_empty() {
        let golds = small_gold();
        let preds: Vec<PredictionRecord> = golds
            .iter()
            .map(|d| pred(&d.id, d.label_a.unwrap(), d.label_b.as_deref().unwrap()))
            .collect();
        let report = score(&preds, &golds).unwrap();
        let one = BTreeMap::from([("only".to_string(), report)]);
        assert_eq!(method_table(&one).unwrap().rows.len(), 1);
        assert!(matches!(method_table(&BTreeMap::new()), Err(EvalError::EmptyReports)));
    }

    #[test]
    fn prediction_jsonl_round_trip() {
        let records = vec![pred("a", 1, "Gen-X"), pred("b", 0, HUMAN_LABEL)];
        let mut buf = Vec::new();
        write_predictions(&records, &mut buf).unwrap();
        let back = read_predictions(buf.as_slice()).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn malformed_prediction_line_is_numbered() {
        let data = b"{\"id\":\"a\",\"label_a\":0,\"p_ai\":0.1,\"label_b\":\"Human\"}\nnot json\n";
        match read_predictions(data.as_slice()) {
            Err(EvalError::MalformedRecord { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn score_is_permutation_invariant(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let generators = ["Gen-A", "Gen-B"];
            let mut golds = Vec::new();
            let mut preds = Vec::new();
            for i in 0..40 {
                let gold_a = u8::from(rng.random_bool(0.5));
                let gold_b = if gold_a == 1 { generators[rng.random_range(0..2)] } else { HUMAN_LABEL };
                golds.push(doc(&format!("d{i}"), gold_a, gold_b));
                let pred_a = u8::from(rng.random_bool(0.5));
                let pred_b = if pred_a == 1 { generators[rng.random_range(0..2)] } else { HUMAN_LABEL };
                preds.push(pred(&format!("d{i}"), pred_a, pred_b));
            }
            let before = score(&preds, &golds).unwrap();
            let mut shuffled_preds = preds.clone();
            let mut shuffled_golds = golds.clone();
            shuffled_preds.shuffle(&mut rng);
            shuffled_golds.shuffle(&mut rng);
            let after = score(&shuffled_preds, &shuffled_golds).unwrap();
            prop_assert_eq!(before.task_a_f1, after.task_a_f1);
            prop_assert_eq!(before.task_b_f1, after.task_b_f1);
            prop_assert_eq!(before.per_class, after.per_class);
            prop_assert_eq!(before.confusion_b, after.confusion_b);
        }
    }
}
