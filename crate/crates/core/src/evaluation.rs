//! Classification metrics and the stratified dataset split.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::samples::Label;

pub const MANIFEST_HEADER: [&str; 2] = ["path", "label"];
pub const LABELS_HEADER: [&str; 2] = ["sample_id", "label"];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid label {0:?}")]
    BadLabel(String),
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("invalid split: {0}")]
    InvalidSplit(&'static str),
    #[error("duplicate entry {0:?}")]
    Duplicate(String),
    #[error("expected header {expected:?}, found {found:?}")]
    BadHeader { expected: String, found: String },
    #[error("id mismatch: missing from predictions {missing:?}, not in truth {extra:?}")]
    IdMismatch { missing: Vec<String>, extra: Vec<String> },
    #[error("CSV failure: {0}")]
    Csv(#[from] csv::Error),
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 4]; 4],
}

impl ConfusionMatrix {
    pub fn add(&mut self, truth: Label, predicted: Label) {
        self.counts[truth.index()][predicted.index()] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, k: usize) -> u64 {
        self.counts[k].iter().sum()
    }

    pub fn column_sum(&self, k: usize) -> u64 {
        self.counts.iter().map(|row| row[k]).sum()
    }
}

impl fmt::Display for ConfusionMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in &self.counts {
            writeln!(f, "{} {} {} {}", row[0], row[1], row[2], row[3])?;
        }
        Ok(())
    }
}

pub fn confusion_from_pairs(pairs: &[(u8, u8)]) -> Result<ConfusionMatrix, EvalError> {
    let mut cm = ConfusionMatrix::default();
    for &(t, p) in pairs {
        let t = Label::from_index(t).map_err(|_| EvalError::BadLabel(t.to_string()))?;
        let p = Label::from_index(p).map_err(|_| EvalError::BadLabel(p.to_string()))?;
        cm.add(t, p);
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "accuracy={:.4} macro_precision={:.4} macro_recall={:.4}",
            self.accuracy, self.macro_precision, self.macro_recall
        )
    }
}

/// Accuracy plus unweighted means of per-class precision and recall.
///
/// The means run over active classes, those appearing as a true or a
/// predicted label. An active class with no predictions has precision 0;
/// one with no true samples has recall 0.
pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics, EvalError> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let mut precision = 0.0;
    let mut recall = 0.0;
    let mut active = 0usize;
    for k in 0..4 {
        let (row, col) = (cm.row_sum(k), cm.column_sum(k));
        if row + col == 0 {
            continue;
        }
        active += 1;
        precision += ratio(cm.counts[k][k], col);
        recall += ratio(cm.counts[k][k], row);
    }
    let trace: u64 = (0..4).map(|k| cm.counts[k][k]).sum();
    Ok(Metrics {
        accuracy: trace as f64 / total as f64,
        macro_precision: precision / active as f64,
        macro_recall: recall / active as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ManifestEntry {
    pub path: String,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self, EvalError> {
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.path.as_str()) {
                return Err(EvalError::Duplicate(e.path.clone()));
            }
        }
        Ok(DatasetManifest { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn class_counts(&self) -> [usize; 4] {
        let mut counts = [0; 4];
        for e in &self.entries {
            counts[e.label.index()] += 1;
        }
        counts
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        let rows = read_two_column_csv(path, MANIFEST_HEADER)?;
        Self::new(rows.into_iter().map(|(path, label)| ManifestEntry { path, label }).collect())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(MANIFEST_HEADER)?;
        for e in &self.entries {
            w.write_record([e.path.as_str(), e.label.name()])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train: 0.8, val: 0.1, test: 0.1, seed: 0 }
    }
}

impl SplitSpec {
    pub fn with_seed(seed: u64) -> Self {
        SplitSpec { seed, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let ratios = [self.train, self.val, self.test];
        if ratios.iter().any(|r| !r.is_finite() || *r <= 0.0) {
            return Err(EvalError::InvalidSplit("ratios must be positive"));
        }
        if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(EvalError::InvalidSplit("ratios must sum to 1"));
        }
        Ok(())
    }

    /// (train, val, test) sizes for a class of `n` entries.
    pub fn class_sizes(&self, n: usize) -> (usize, usize, usize) {
        // The epsilon keeps products like 0.29 * 100 from flooring to 28.
        let floor = |r: f64| ((r * n as f64) + 1e-9).floor() as usize;
        let test = floor(self.test).min(n);
        let val = floor(self.val).min(n - test);
        (n - test - val, val, test)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Split {
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    pub test: DatasetManifest,
    pub empty_classes: Vec<Label>,
}

fn class_rng(seed: u64, class: Label) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8] = class as u8;
    ChaCha8Rng::from_seed(key)
}

/// Splits each class separately. A class's entries are sorted by path and
/// shuffled with a stream seeded by (seed, class), so the outcome does not
/// depend on manifest order.
pub fn stratified_split(manifest: &DatasetManifest, spec: &SplitSpec) -> Result<Split, EvalError> {
    spec.validate()?;
    let mut by_class: BTreeMap<Label, Vec<ManifestEntry>> = BTreeMap::new();
    for e in &manifest.entries {
        by_class.entry(e.label).or_default().push(e.clone());
    }
    let mut split = Split::default();
    for label in Label::ALL {
        let mut entries = by_class.remove(&label).unwrap_or_default();
        if entries.is_empty() {
            log::warn!("class {label} has no entries");
            split.empty_classes.push(label);
            continue;
        }
        entries.sort();
        entries.shuffle(&mut class_rng(spec.seed, label));
        let (_, val, test) = spec.class_sizes(entries.len());
        let rest = entries.split_off(test);
        split.test.entries.extend(entries);
        let mut rest = rest;
        let train = rest.split_off(val);
        split.val.entries.extend(rest);
        split.train.entries.extend(train);
    }
    Ok(split)
}

fn read_two_column_csv(path: impl AsRef<Path>, header: [&str; 2]) -> Result<Vec<(String, Label)>, EvalError> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let found = r.headers()?.clone();
    if found.len() != 2 || found[0] != *header[0] || found[1] != *header[1] {
        return Err(EvalError::BadHeader {
            expected: header.join(","),
            found: found.iter().collect::<Vec<_>>().join(","),
        });
    }
    let mut rows = Vec::new();
    for record in r.records() {
        let record = record?;
        if record.len() != 2 {
            return Err(EvalError::BadHeader { expected: header.join(","), found: format!("{} fields", record.len()) });
        }
        let label = record[1].parse::<Label>().map_err(|e| EvalError::BadLabel(e.0))?;
        rows.push((record[0].to_string(), label));
    }
    Ok(rows)
}

/// Reads a `sample_id,label` file into an id-keyed map.
pub fn read_labels_csv(path: impl AsRef<Path>) -> Result<BTreeMap<String, Label>, EvalError> {
    let mut map = BTreeMap::new();
    for (id, label) in read_two_column_csv(path, LABELS_HEADER)? {
        if map.insert(id.clone(), label).is_some() {
            return Err(EvalError::Duplicate(id));
        }
    }
    Ok(map)
}

pub fn write_labels_csv<'a>(
    rows: impl IntoIterator<Item = (&'a str, Label)>,
    path: impl AsRef<Path>,
) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(LABELS_HEADER)?;
    for (id, label) in rows {
        w.write_record([id, label.name()])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Joins truth and predictions on sample id.
pub fn confusion_from_maps(
    truth: &BTreeMap<String, Label>,
    pred: &BTreeMap<String, Label>,
) -> Result<ConfusionMatrix, EvalError> {
    let missing: Vec<String> = truth.keys().filter(|k| !pred.contains_key(*k)).cloned().collect();
    let extra: Vec<String> = pred.keys().filter(|k| !truth.contains_key(*k)).cloned().collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(EvalError::IdMismatch { missing, extra });
    }
    let mut cm = ConfusionMatrix::default();
    for (id, &t) in truth {
        cm.add(t, pred[id]);
    }
    Ok(cm)
}

pub fn evaluate_files(
    truth: impl AsRef<Path>,
    pred: impl AsRef<Path>,
) -> Result<(ConfusionMatrix, Metrics), EvalError> {
    let cm = confusion_from_maps(&read_labels_csv(truth)?, &read_labels_csv(pred)?)?;
    Ok((cm, metrics(&cm)?))
}

pub fn write_confusion_csv(cm: &ConfusionMatrix, path: impl AsRef<Path>) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["true\\predicted"];
    header.extend(Label::ALL.iter().map(|l| l.name()));
    w.write_record(&header)?;
    for l in Label::ALL {
        let mut row = vec![l.name().to_string()];
        row.extend(cm.counts[l.index()].iter().map(u64::to_string));
        w.write_record(&row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
