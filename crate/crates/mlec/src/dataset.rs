//! Labeled code corpus: ingestion, cleaning, label encoding, multi-label
//! stratified splitting, batching, and synthetic corpus generation.
//!
//! The on-disk record format is line-delimited JSON, one object per line
//! with a `code` string and a `labels` list of label names. Records with a
//! missing label list receive the all-zero vector.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::stream_rng;
use crate::tokenizer::tokenize;

/// The canonical error-label vocabulary, in its fixed order.
pub const CANONICAL_LABELS: [&str; 11] = [
    "variable_operation",
    "loop_statement",
    "literal",
    "list_operation",
    "input_output",
    "import",
    "function_invocation",
    "function_definition",
    "conditional_statement",
    "comparison_operator",
    "arithmetic_operator",
];

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at line {line}: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error("unknown label `{name}` at line {line}")]
    UnknownLabel { line: usize, name: String },
    #[error("label vocabulary is invalid: {0}")]
    InvalidVocab(String),
    #[error("sample has {found} labels, vocabulary has {expected}")]
    LabelLength { expected: usize, found: usize },
    #[error("dataset is empty after filtering")]
    EmptyResult,
    #[error("need at least 2 samples to split, got {0}")]
    TooFewSamples(usize),
}

/// Ordered list of label identifiers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVocab {
    names: Vec<String>,
}

impl LabelVocab {
    pub fn new(names: Vec<String>) -> Result<Self, DatasetError> {
        if names.is_empty() {
            return Err(DatasetError::InvalidVocab("no labels".into()));
        }
        let mut seen = BTreeSet::new();
        for n in &names {
            if n.is_empty() {
                return Err(DatasetError::InvalidVocab("empty label name".into()));
            }
            if !seen.insert(n.clone()) {
                return Err(DatasetError::InvalidVocab(format!("duplicate label `{n}`")));
            }
        }
        Ok(LabelVocab { names })
    }

    /// The 11-label error vocabulary.
    pub fn canonical() -> Self {
        LabelVocab {
            names: CANONICAL_LABELS.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// One-hot encodes a list of label names against this vocabulary.
    pub fn encode(&self, labels: &[String], line: usize) -> Result<Vec<u8>, DatasetError> {
        let mut v = vec![0u8; self.len()];
        for name in labels {
            let idx = self
                .index_of(name)
                .ok_or_else(|| DatasetError::UnknownLabel {
                    line,
                    name: name.clone(),
                })?;
            v[idx] = 1;
        }
        Ok(v)
    }
}

/// One cleaned code snippet with its multi-hot label vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub code: String,
    pub labels: Vec<u8>,
}

impl LabeledSample {
    pub fn label_names(&self, vocab: &LabelVocab) -> Vec<String> {
        self.labels
            .iter()
            .zip(vocab.names())
            .filter(|(&bit, _)| bit == 1)
            .map(|(_, name)| name.clone())
            .collect()
    }
}

/// An immutable collection of labeled samples sharing one vocabulary.
#[derive(Debug, Clone)]
pub struct Dataset {
    samples: Vec<LabeledSample>,
    vocab: LabelVocab,
}

impl Dataset {
    pub fn new(samples: Vec<LabeledSample>, vocab: LabelVocab) -> Result<Self, DatasetError> {
        for s in &samples {
            if s.labels.len() != vocab.len() {
                return Err(DatasetError::LabelLength {
                    expected: vocab.len(),
                    found: s.labels.len(),
                });
            }
        }
        Ok(Dataset { samples, vocab })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn vocab(&self) -> &LabelVocab {
        &self.vocab
    }

    /// Positive count per label.
    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.vocab.len()];
        for s in &self.samples {
            for (c, &bit) in counts.iter_mut().zip(&s.labels) {
                *c += bit as usize;
            }
        }
        counts
    }

    /// N x L label matrix as f64 rows.
    pub fn label_matrix(&self) -> Vec<Vec<f64>> {
        self.samples
            .iter()
            .map(|s| s.labels.iter().map(|&b| b as f64).collect())
            .collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawRecord {
    code: String,
    #[serde(default)]
    labels: Option<Vec<String>>,
}

/// Loads a line-delimited record file, one-hot encoding labels against
/// `vocab`. Records without a label list get the all-zero vector.
pub fn load_dataset(path: &Path, vocab: &LabelVocab) -> Result<Dataset, DatasetError> {
    let file = fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RawRecord =
            serde_json::from_str(&line).map_err(|e| DatasetError::MalformedRecord {
                line: line_no,
                message: e.to_string(),
            })?;
        let labels = match &record.labels {
            Some(names) => vocab.encode(names, line_no)?,
            None => vec![0u8; vocab.len()],
        };
        samples.push(LabeledSample {
            code: record.code,
            labels,
        });
    }
    Dataset::new(samples, vocab.clone())
}

/// Writes a dataset back out in the record format.
pub fn save_records(path: &Path, dataset: &Dataset) -> Result<(), DatasetError> {
    let mut out = String::new();
    for s in dataset.samples() {
        let record = RawRecord {
            code: s.code.clone(),
            labels: Some(s.label_names(dataset.vocab())),
        };
        let _ = writeln!(out, "{}", serde_json::to_string(&record).expect("record json"));
    }
    write_atomic(path, out.as_bytes())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    let io_err = |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    };
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io_err)?;
    f.write_all(bytes).map_err(io_err)?;
    f.sync_all().map_err(io_err)?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err)
}

// ---- cleaning -------------------------------------------------------------

/// Strips comments, trailing whitespace, edge blank lines, and unused
/// imports while preserving indentation and case. Idempotent.
pub fn clean_code(source: &str) -> String {
    let mut lines: Vec<String> = Vec::new();
    for raw in source.lines() {
        let no_comment = strip_comment(raw);
        let stripped = no_comment.trim_end();
        if stripped.is_empty() && !raw.trim().is_empty() {
            // comment-only line
            continue;
        }
        lines.push(stripped.to_string());
    }

    // Token stream of all non-import lines, for unused-import detection.
    let mut used: BTreeSet<String> = BTreeSet::new();
    for line in &lines {
        if imported_names(line).is_none() {
            for tok in tokenize(line) {
                used.insert(tok);
            }
        }
    }
    lines.retain(|line| match imported_names(line) {
        Some(names) => names.is_empty() || names.iter().any(|n| used.contains(n)),
        None => true,
    });

    while lines.first().is_some_and(|l| l.is_empty()) {
        lines.remove(0);
    }
    while lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    lines.join("\n")
}

/// Truncates a line at the first `#` that is not inside a quoted string.
fn strip_comment(line: &str) -> &str {
    let bytes = line.as_bytes();
    let mut quote: Option<u8> = None;
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        match quote {
            Some(q) => {
                if b == b'\\' {
                    i += 1; // skip escaped char
                } else if b == q {
                    quote = None;
                }
            }
            None => {
                if b == b'\'' || b == b'"' {
                    quote = Some(b);
                } else if b == b'#' {
                    return &line[..i];
                }
            }
        }
        i += 1;
    }
    line
}

/// Names bound by an import line, or `None` when the line is not an import.
/// `import *` yields an empty list, which callers treat as "keep".
fn imported_names(line: &str) -> Option<Vec<String>> {
    let trimmed = line.trim_start();
    let rest = if let Some(r) = trimmed.strip_prefix("import ") {
        r
    } else if let Some(r) = trimmed.strip_prefix("from ") {
        let (_, imports) = r.split_once(" import ")?;
        imports
    } else {
        return None;
    };
    let mut names = Vec::new();
    for part in rest.split(',') {
        let part = part.trim();
        if part == "*" {
            return Some(Vec::new());
        }
        let bound = match part.split_once(" as ") {
            Some((_, alias)) => alias.trim(),
            // `import a.b.c` binds `a`
            None => part.split('.').next().unwrap_or(part).trim(),
        };
        if !bound.is_empty() {
            names.push(bound.to_string());
        }
    }
    Some(names)
}

/// Removes samples with empty cleaned code; with `allow_zero_labels` false
/// also removes all-zero-label samples. Errors when nothing remains.
pub fn drop_invalid(dataset: &Dataset, allow_zero_labels: bool) -> Result<Dataset, DatasetError> {
    let samples: Vec<LabeledSample> = dataset
        .samples()
        .iter()
        .filter(|s| !s.code.trim().is_empty())
        .filter(|s| allow_zero_labels || s.labels.iter().any(|&b| b == 1))
        .cloned()
        .collect();
    if samples.is_empty() {
        return Err(DatasetError::EmptyResult);
    }
    Dataset::new(samples, dataset.vocab().clone())
}

// ---- splitting ------------------------------------------------------------

/// Train fraction and seed for [`stratified_split`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

/// Per-label positive counts for a finished split, written alongside the
/// record files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub train_fraction: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub labels: Vec<LabelSplitCount>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelSplitCount {
    pub name: String,
    pub train_pos: usize,
    pub val_pos: usize,
}

impl SplitManifest {
    pub fn from_split(train: &Dataset, val: &Dataset, cfg: &SplitConfig) -> Self {
        let tc = train.label_counts();
        let vc = val.label_counts();
        SplitManifest {
            seed: cfg.seed,
            train_fraction: cfg.train_fraction,
            n_train: train.len(),
            n_val: val.len(),
            labels: train
                .vocab()
                .names()
                .iter()
                .zip(tc.iter().zip(&vc))
                .map(|(name, (&train_pos, &val_pos))| LabelSplitCount {
                    name: name.clone(),
                    train_pos,
                    val_pos,
                })
                .collect(),
        }
    }
}

/// Iterative multi-label stratification: samples are assigned label by
/// label, rarest label first, to the partition with the largest remaining
/// demand for that label. Ties break by seeded RNG. Partition sizes are
/// exact: `|train| = round(train_fraction * N)`.
pub fn stratified_split(
    dataset: &Dataset,
    cfg: &SplitConfig,
) -> Result<(Dataset, Dataset), DatasetError> {
    let n = dataset.len();
    if n < 2 {
        return Err(DatasetError::TooFewSamples(n));
    }
    let n_train = (cfg.train_fraction * n as f64).round() as usize;
    let n_train = n_train.min(n);
    let mut rng = stream_rng(cfg.seed, "dataset/split");
    let l = dataset.vocab().len();

    let mut capacity = [n_train, n - n_train];
    let totals = dataset.label_counts();
    let fractions = [cfg.train_fraction, 1.0 - cfg.train_fraction];
    let mut demand: Vec<[f64; 2]> = (0..l)
        .map(|j| [fractions[0] * totals[j] as f64, fractions[1] * totals[j] as f64])
        .collect();

    let mut assignment: Vec<Option<usize>> = vec![None; n];
    loop {
        // Rarest label with unassigned positives.
        let mut remaining = vec![0usize; l];
        for (i, s) in dataset.samples().iter().enumerate() {
            if assignment[i].is_none() {
                for (r, &bit) in remaining.iter_mut().zip(&s.labels) {
                    *r += bit as usize;
                }
            }
        }
        let Some(label) = (0..l)
            .filter(|&j| remaining[j] > 0)
            .min_by_key(|&j| remaining[j])
        else {
            break;
        };
        for i in 0..n {
            if assignment[i].is_some() || dataset.samples()[i].labels[label] == 0 {
                continue;
            }
            let side = pick_side(&demand[label], &capacity, &mut rng);
            assignment[i] = Some(side);
            capacity[side] -= 1;
            for (j, &bit) in dataset.samples()[i].labels.iter().enumerate() {
                if bit == 1 {
                    demand[j][side] -= 1.0;
                }
            }
        }
    }
    // Zero-label leftovers go to the side with more remaining capacity.
    for slot in assignment.iter_mut() {
        if slot.is_none() {
            let side = match capacity[0].cmp(&capacity[1]) {
                std::cmp::Ordering::Greater => 0,
                std::cmp::Ordering::Less => 1,
                std::cmp::Ordering::Equal => usize::from(rng.gen::<bool>()),
            };
            *slot = Some(side);
            capacity[side] -= 1;
        }
    }

    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, s) in dataset.samples().iter().enumerate() {
        match assignment[i] {
            Some(0) => train.push(s.clone()),
            _ => val.push(s.clone()),
        }
    }
    Ok((
        Dataset::new(train, dataset.vocab().clone())?,
        Dataset::new(val, dataset.vocab().clone())?,
    ))
}

fn pick_side(demand: &[f64; 2], capacity: &[usize; 2], rng: &mut impl Rng) -> usize {
    match (capacity[0] > 0, capacity[1] > 0) {
        (true, false) => return 0,
        (false, true) => return 1,
        (false, false) => unreachable!("both partitions full with samples left"),
        (true, true) => {}
    }
    if demand[0] > demand[1] {
        0
    } else if demand[1] > demand[0] {
        1
    } else {
        usize::from(rng.gen::<bool>())
    }
}

// ---- batching ---------------------------------------------------------

/// Partitions `0..n` into batches, optionally seeded-shuffled. The final
/// batch may be smaller.
pub fn make_batches(n: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        let mut rng = stream_rng(seed, "dataset/batches");
        order.shuffle(&mut rng);
    }
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

// ---- synthetic corpus ---------------------------------------------------

/// Knobs for [`generate_synthetic_with`].
#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    /// Expected number of positive labels per sample when no explicit
    /// per-label prevalence is given.
    pub avg_labels_per_sample: f64,
    /// Optional per-label positive rates, overriding the uniform default.
    pub prevalence: Option<Vec<f64>>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            avg_labels_per_sample: 3.0,
            prevalence: None,
        }
    }
}

/// Marker token planted into a sample iff the label is positive.
pub fn marker_token(label: &str) -> String {
    format!("trig_{label}")
}

/// Generates a code-like corpus where each label's presence is signalled by
/// its marker token, so label vectors are recoverable by a token scan.
pub fn generate_synthetic(n: usize, vocab: &LabelVocab, seed: u64) -> Dataset {
    generate_synthetic_with(n, vocab, seed, &SyntheticConfig::default())
}

pub fn generate_synthetic_with(
    n: usize,
    vocab: &LabelVocab,
    seed: u64,
    cfg: &SyntheticConfig,
) -> Dataset {
    assert!(n >= 1, "need at least one sample");
    let l = vocab.len();
    let default_p = (cfg.avg_labels_per_sample / l as f64).clamp(0.0, 1.0);
    let prevalence: Vec<f64> = match &cfg.prevalence {
        Some(p) => {
            assert_eq!(p.len(), l, "prevalence length must match vocabulary");
            p.clone()
        }
        None => vec![default_p; l],
    };
    let mut rng = stream_rng(seed, "dataset/synthetic");

    let filler_names = ["a", "b", "c", "total", "idx", "line", "value"];
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let labels: Vec<u8> = prevalence
            .iter()
            .map(|&p| u8::from(rng.gen::<f64>() < p))
            .collect();

        let mut lines: Vec<String> = Vec::new();
        let fillers = rng.gen_range(2..=5);
        for _ in 0..fillers {
            let name = filler_names[rng.gen_range(0..filler_names.len())];
            let value = rng.gen_range(0..100);
            match rng.gen_range(0..3) {
                0 => lines.push(format!("{name} = {value}")),
                1 => lines.push(format!("print({name})")),
                _ => lines.push(format!("{name} = {name} + {value}")),
            }
        }
        for (j, &bit) in labels.iter().enumerate() {
            if bit == 1 {
                let marker = marker_token(&vocab.names()[j]);
                let at = rng.gen_range(0..=lines.len());
                lines.insert(at, format!("{marker}({})", rng.gen_range(0..10)));
            }
        }
        samples.push(LabeledSample {
            code: lines.join("\n"),
            labels,
        });
    }
    Dataset::new(samples, vocab.clone()).expect("synthetic labels match vocab")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab3() -> LabelVocab {
        LabelVocab::new(vec!["x".into(), "y".into(), "z".into()]).unwrap()
    }

    #[test]
    fn canonical_vocab_has_eleven_labels() {
        let v = LabelVocab::canonical();
        assert_eq!(v.len(), 11);
        assert_eq!(v.names()[0], "variable_operation");
        assert_eq!(v.names()[10], "arithmetic_operator");
    }

    #[test]
    fn vocab_rejects_duplicates_and_empty() {
        assert!(LabelVocab::new(vec!["a".into(), "a".into()]).is_err());
        assert!(LabelVocab::new(vec!["".into()]).is_err());
        assert!(LabelVocab::new(vec![]).is_err());
    }

    #[test]
    fn load_dataset_counts_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let mut f = fs::File::create(&path).unwrap();
        writeln!(f, r#"{{"code": "x=1", "labels": ["x"]}}"#).unwrap();
        writeln!(f, r#"{{"code": "y=2", "labels": ["y", "z"]}}"#).unwrap();
        drop(f);
        let ds = load_dataset(&path, &vocab3()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.samples()[1].labels, vec![0, 1, 1]);
    }

    #[test]
    fn missing_label_list_becomes_all_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        fs::write(&path, "{\"code\": \"pass\"}\n").unwrap();
        let ds = load_dataset(&path, &vocab3()).unwrap();
        assert_eq!(ds.samples()[0].labels, vec![0, 0, 0]);
    }

    #[test]
    fn canonical_one_hot_positions() {
        let v = LabelVocab::canonical();
        let enc = v
            .encode(&["loop_statement".into(), "literal".into()], 1)
            .unwrap();
        let mut expect = vec![0u8; 11];
        expect[1] = 1;
        expect[2] = 1;
        assert_eq!(enc, expect);
    }

    #[test]
    fn unknown_label_reports_name_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        fs::write(&path, "{\"code\": \"x\", \"labels\": [\"bogus\"]}\n").unwrap();
        let err = load_dataset(&path, &vocab3()).unwrap_err();
        match err {
            DatasetError::UnknownLabel { line, name } => {
                assert_eq!(line, 1);
                assert_eq!(name, "bogus");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn malformed_record_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        fs::write(&path, "{\"code\": \"ok\"}\nnot json\n").unwrap();
        let err = load_dataset(&path, &vocab3()).unwrap_err();
        assert!(matches!(err, DatasetError::MalformedRecord { line: 2, .. }));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_dataset(Path::new("/nonexistent/x.jsonl"), &vocab3()).unwrap_err();
        assert!(matches!(err, DatasetError::Io { .. }));
    }

    #[test]
    fn clean_strips_comments_and_trailing_space() {
        assert_eq!(clean_code("x=1  # set x\n"), "x=1");
    }

    #[test]
    fn clean_preserves_case() {
        assert_eq!(clean_code("X = 1"), "X = 1");
    }

    #[test]
    fn clean_preserves_indentation() {
        let src = "def f():\n    return 1";
        assert_eq!(clean_code(src), src);
    }

    #[test]
    fn clean_keeps_hash_inside_strings() {
        assert_eq!(clean_code("s = \"#nope\"  # real"), "s = \"#nope\"");
    }

    #[test]
    fn unused_import_is_removed_used_is_kept() {
        assert_eq!(clean_code("import os\nprint(1)"), "print(1)");
        assert_eq!(clean_code("import os\nos.getcwd()"), "import os\nos.getcwd()");
    }

    #[test]
    fn import_alias_counts_as_binding() {
        assert_eq!(clean_code("import numpy as np\nnp.ones(3)").lines().count(), 2);
        assert_eq!(clean_code("import numpy as np\nprint(2)"), "print(2)");
        assert_eq!(clean_code("from os import path\npath.join"), "from os import path\npath.join");
    }

    #[test]
    fn comment_only_lines_vanish_blank_edges_trimmed() {
        assert_eq!(clean_code("\n# header\nx=1\n\n"), "x=1");
    }

    #[test]
    fn drop_invalid_removes_empty_code() {
        let v = vocab3();
        let ds = Dataset::new(
            vec![
                LabeledSample { code: "x=1".into(), labels: vec![1, 0, 0] },
                LabeledSample { code: "".into(), labels: vec![0, 1, 0] },
                LabeledSample { code: "y=2".into(), labels: vec![0, 0, 1] },
            ],
            v,
        )
        .unwrap();
        let out = drop_invalid(&ds, true).unwrap();
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn drop_invalid_all_empty_errors() {
        let ds = Dataset::new(
            vec![LabeledSample { code: " ".into(), labels: vec![0, 0, 0] }],
            vocab3(),
        )
        .unwrap();
        assert!(matches!(drop_invalid(&ds, true), Err(DatasetError::EmptyResult)));
    }

    #[test]
    fn drop_invalid_zero_label_filter() {
        let ds = Dataset::new(
            vec![
                LabeledSample { code: "a".into(), labels: vec![0, 0, 0] },
                LabeledSample { code: "b".into(), labels: vec![0, 0, 0] },
                LabeledSample { code: "c".into(), labels: vec![1, 0, 0] },
            ],
            vocab3(),
        )
        .unwrap();
        let out = drop_invalid(&ds, false).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out.samples()[0].code, "c");
    }

    #[test]
    fn split_sizes_follow_rounding() {
        let v = vocab3();
        let ds = generate_synthetic(10, &v, 3);
        let (train, val) = stratified_split(&ds, &SplitConfig { train_fraction: 0.8, seed: 1 }).unwrap();
        assert_eq!(train.len(), 8);
        assert_eq!(val.len(), 2);
    }

    #[test]
    fn split_is_deterministic() {
        let ds = generate_synthetic(50, &LabelVocab::canonical(), 9);
        let cfg = SplitConfig { train_fraction: 0.8, seed: 42 };
        let (t1, v1) = stratified_split(&ds, &cfg).unwrap();
        let (t2, v2) = stratified_split(&ds, &cfg).unwrap();
        assert_eq!(t1.samples(), t2.samples());
        assert_eq!(v1.samples(), v2.samples());
    }

    #[test]
    fn split_rejects_single_sample() {
        let ds = Dataset::new(
            vec![LabeledSample { code: "x".into(), labels: vec![1, 0, 0] }],
            vocab3(),
        )
        .unwrap();
        assert!(matches!(
            stratified_split(&ds, &SplitConfig::default()),
            Err(DatasetError::TooFewSamples(1))
        ));
    }

    #[test]
    fn skewed_corpus_keeps_rates_close() {
        let vocab = LabelVocab::canonical();
        let mut prevalence = vec![0.3; 11];
        prevalence[7] = 0.05;
        let cfg = SyntheticConfig { avg_labels_per_sample: 3.0, prevalence: Some(prevalence) };
        let ds = generate_synthetic_with(1000, &vocab, 5, &cfg);
        let (train, val) =
            stratified_split(&ds, &SplitConfig { train_fraction: 0.8, seed: 11 }).unwrap();
        let tc = train.label_counts();
        let vc = val.label_counts();
        for j in 0..11 {
            let tr = tc[j] as f64 / train.len() as f64;
            let vr = vc[j] as f64 / val.len() as f64;
            assert!(
                (tr - vr).abs() <= 0.05,
                "label {j}: train rate {tr:.3} vs val rate {vr:.3}"
            );
        }
    }

    #[test]
    fn batches_partition_in_order() {
        let batches = make_batches(10, 4, None);
        assert_eq!(batches, vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7], vec![8, 9]]);
    }

    #[test]
    fn batch_shuffle_is_seeded() {
        let a = make_batches(20, 6, Some(5));
        let b = make_batches(20, 6, Some(5));
        assert_eq!(a, b);
        let c = make_batches(20, 6, Some(6));
        assert_ne!(a, c);
    }

    #[test]
    fn singleton_batches() {
        let batches = make_batches(3, 1, None);
        assert_eq!(batches.len(), 3);
    }

    #[test]
    fn synthetic_labels_match_markers() {
        let vocab = LabelVocab::canonical();
        let ds = generate_synthetic(32, &vocab, 7);
        assert_eq!(ds.len(), 32);
        for s in ds.samples() {
            let tokens = tokenize(&s.code);
            for (j, name) in vocab.names().iter().enumerate() {
                let marker = marker_token(name);
                let present = tokens.iter().any(|t| *t == marker);
                assert_eq!(present, s.labels[j] == 1, "marker {marker}");
            }
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let vocab = LabelVocab::canonical();
        let a = generate_synthetic(8, &vocab, 3);
        let b = generate_synthetic(8, &vocab, 3);
        assert_eq!(a.samples(), b.samples());
    }

    #[test]
    fn synthetic_single_sample() {
        let ds = generate_synthetic(1, &LabelVocab::canonical(), 0);
        assert_eq!(ds.len(), 1);
        assert!(!ds.samples()[0].code.is_empty());
    }
}
