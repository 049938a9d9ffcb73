//! Multi-label evaluation: average accuracy, exact match, one-error,
//! macro/weighted precision-recall-F1, Hamming loss, Jaccard similarity,
//! and rank-based ROC-AUC (micro, macro, weighted).
//!
//! Conventions, pinned by tests: label-level P/R/F1 with a zero denominator
//! score 0; one-error counts rows without any true label as errors; a row
//! whose predicted and true label sets are both empty has Jaccard 1; labels
//! missing a class are excluded from macro/weighted AUC with weight
//! renormalization and are listed in the report.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("empty prediction set")]
    EmptyInput,
    #[error("shape mismatch: y_true {true_shape:?}, y_pred {pred_shape:?}, scores {score_shape:?}")]
    ShapeMismatch {
        true_shape: (usize, usize),
        pred_shape: (usize, usize),
        score_shape: (usize, usize),
    },
    #[error("{matrix}[{row}][{col}] = {value} is out of range")]
    InvalidValue {
        matrix: &'static str,
        row: usize,
        col: usize,
        value: f64,
    },
    #[error("ROC-AUC ({mode}) undefined: no label carries both classes")]
    NoValidClass { mode: &'static str },
}

/// Ground truth, thresholded predictions, and probability scores for one
/// evaluation pass.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    y_true: Vec<Vec<u8>>,
    y_pred: Vec<Vec<u8>>,
    scores: Vec<Vec<f64>>,
}

impl PredictionSet {
    pub fn new(
        y_true: Vec<Vec<u8>>,
        y_pred: Vec<Vec<u8>>,
        scores: Vec<Vec<f64>>,
    ) -> Result<Self, MetricsError> {
        let n = y_true.len();
        if n == 0 {
            return Err(MetricsError::EmptyInput);
        }
        let l = y_true[0].len();
        let dims = |m: &[Vec<u8>]| (m.len(), m.first().map_or(0, Vec::len));
        let sdims = (scores.len(), scores.first().map_or(0, Vec::len));
        if y_pred.len() != n
            || scores.len() != n
            || y_true.iter().any(|r| r.len() != l)
            || y_pred.iter().any(|r| r.len() != l)
            || scores.iter().any(|r| r.len() != l)
            || l == 0
        {
            return Err(MetricsError::ShapeMismatch {
                true_shape: dims(&y_true),
                pred_shape: dims(&y_pred),
                score_shape: sdims,
            });
        }
        for (name, m) in [("y_true", &y_true), ("y_pred", &y_pred)] {
            for (i, row) in m.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    if v > 1 {
                        return Err(MetricsError::InvalidValue {
                            matrix: name,
                            row: i,
                            col: j,
                            value: v as f64,
                        });
                    }
                }
            }
        }
        for (i, row) in scores.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(MetricsError::InvalidValue {
                        matrix: "scores",
                        row: i,
                        col: j,
                        value: v,
                    });
                }
            }
        }
        Ok(PredictionSet {
            y_true,
            y_pred,
            scores,
        })
    }

    pub fn n(&self) -> usize {
        self.y_true.len()
    }

    pub fn l(&self) -> usize {
        self.y_true[0].len()
    }

    pub fn y_true(&self) -> &[Vec<u8>] {
        &self.y_true
    }

    pub fn y_pred(&self) -> &[Vec<u8>] {
        &self.y_pred
    }

    pub fn scores(&self) -> &[Vec<f64>] {
        &self.scores
    }
}

/// Mean over samples of the per-sample fraction of matching label
/// positions (true positives and true negatives both count).
pub fn avg_accuracy(ps: &PredictionSet) -> f64 {
    let l = ps.l() as f64;
    let total: f64 = ps
        .y_true
        .iter()
        .zip(&ps.y_pred)
        .map(|(t, p)| {
            t.iter().zip(p).filter(|(a, b)| a == b).count() as f64 / l
        })
        .sum();
    total / ps.n() as f64
}

/// Fraction and count of rows whose whole label vector matches.
pub fn exact_match(ps: &PredictionSet) -> (f64, usize) {
    let count = ps
        .y_true
        .iter()
        .zip(&ps.y_pred)
        .filter(|(t, p)| t == p)
        .count();
    (count as f64 / ps.n() as f64, count)
}

/// Fraction of rows whose top-scored label is not a true label. Ties take
/// the lowest label index; rows with no true label count as errors.
pub fn one_error(ps: &PredictionSet) -> f64 {
    let mut errors = 0usize;
    for (truth, scores) in ps.y_true.iter().zip(&ps.scores) {
        let mut best = 0usize;
        for (j, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = j;
            }
        }
        if truth[best] == 0 {
            errors += 1;
        }
    }
    errors as f64 / ps.n() as f64
}

/// Per-label confusion counts, supports, and frequency weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionCounts {
    pub tp: Vec<usize>,
    pub fp: Vec<usize>,
    pub fn_: Vec<usize>,
    pub tn: Vec<usize>,
    pub support: Vec<usize>,
    /// `support_j / total_support`; all zero when no label has support.
    pub weights: Vec<f64>,
}

pub fn confusion(ps: &PredictionSet) -> ConfusionCounts {
    let l = ps.l();
    let mut counts = ConfusionCounts {
        tp: vec![0; l],
        fp: vec![0; l],
        fn_: vec![0; l],
        tn: vec![0; l],
        support: vec![0; l],
        weights: vec![0.0; l],
    };
    for (truth, pred) in ps.y_true.iter().zip(&ps.y_pred) {
        for j in 0..l {
            match (truth[j], pred[j]) {
                (1, 1) => counts.tp[j] += 1,
                (0, 1) => counts.fp[j] += 1,
                (1, 0) => counts.fn_[j] += 1,
                (0, 0) => counts.tn[j] += 1,
                _ => unreachable!("validated binary"),
            }
        }
    }
    for j in 0..l {
        counts.support[j] = counts.tp[j] + counts.fn_[j];
    }
    let total: usize = counts.support.iter().sum();
    if total > 0 {
        for j in 0..l {
            counts.weights[j] = counts.support[j] as f64 / total as f64;
        }
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Averaging {
    Macro,
    Weighted,
}

fn safe_div(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Per-label precision, recall, F1 (zero denominators score 0).
pub fn per_label_prf(counts: &ConfusionCounts) -> Vec<(f64, f64, f64)> {
    (0..counts.tp.len())
        .map(|j| {
            let (tp, fp, fn_) = (counts.tp[j] as f64, counts.fp[j] as f64, counts.fn_[j] as f64);
            (
                safe_div(tp, tp + fp),
                safe_div(tp, tp + fn_),
                safe_div(2.0 * tp, 2.0 * tp + fp + fn_),
            )
        })
        .collect()
}

/// Averaged precision, recall, F1. Macro averages each label's metric
/// uniformly; weighted uses the frequency weights.
pub fn prf(counts: &ConfusionCounts, averaging: Averaging) -> (f64, f64, f64) {
    let per_label = per_label_prf(counts);
    let l = per_label.len() as f64;
    match averaging {
        Averaging::Macro => per_label.iter().fold((0.0, 0.0, 0.0), |acc, (p, r, f)| {
            (acc.0 + p / l, acc.1 + r / l, acc.2 + f / l)
        }),
        Averaging::Weighted => per_label
            .iter()
            .zip(&counts.weights)
            .fold((0.0, 0.0, 0.0), |acc, ((p, r, f), &w)| {
                (acc.0 + w * p, acc.1 + w * r, acc.2 + w * f)
            }),
    }
}

/// Fraction of mismatched positions over all `N * L` cells.
pub fn hamming_loss(ps: &PredictionSet) -> f64 {
    let mismatches: usize = ps
        .y_true
        .iter()
        .zip(&ps.y_pred)
        .map(|(t, p)| t.iter().zip(p).filter(|(a, b)| a != b).count())
        .sum();
    mismatches as f64 / (ps.n() * ps.l()) as f64
}

/// Mean per-row `|pred & true| / |pred | true|`; a row with both sets
/// empty scores 1.
pub fn jaccard(ps: &PredictionSet) -> f64 {
    let total: f64 = ps
        .y_true
        .iter()
        .zip(&ps.y_pred)
        .map(|(t, p)| {
            let inter = t.iter().zip(p).filter(|(&a, &b)| a == 1 && b == 1).count();
            let union = t.iter().zip(p).filter(|(&a, &b)| a == 1 || b == 1).count();
            if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            }
        })
        .sum();
    total / ps.n() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AucMode {
    Micro,
    Macro,
    Weighted,
}

/// Rank-statistic AUC with average ranks on ties:
/// `(sum of positive ranks - n_pos (n_pos + 1) / 2) / (n_pos * n_neg)`.
/// Returns `None` when only one class is present.
fn auc_binary(pairs: &[(f64, u8)]) -> Option<f64> {
    let n_pos = pairs.iter().filter(|(_, y)| *y == 1).count();
    let n_neg = pairs.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| pairs[a].0.partial_cmp(&pairs[b].0).expect("finite scores"));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pairs[order[j + 1]].0 == pairs[order[i]].0 {
            j += 1;
        }
        // ranks are 1-based; tied entries share the average rank
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &order[i..=j] {
            if pairs[k].1 == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    Some((rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64)
}

/// ROC-AUC for one label column.
pub fn label_auc(ps: &PredictionSet, label: usize) -> Option<f64> {
    let pairs: Vec<(f64, u8)> = ps
        .scores
        .iter()
        .zip(&ps.y_true)
        .map(|(s, t)| (s[label], t[label]))
        .collect();
    auc_binary(&pairs)
}

pub fn roc_auc(ps: &PredictionSet, mode: AucMode) -> Result<f64, MetricsError> {
    match mode {
        AucMode::Micro => {
            let pairs: Vec<(f64, u8)> = ps
                .scores
                .iter()
                .zip(&ps.y_true)
                .flat_map(|(s, t)| s.iter().copied().zip(t.iter().copied()))
                .collect();
            auc_binary(&pairs).ok_or(MetricsError::NoValidClass { mode: "micro" })
        }
        AucMode::Macro => {
            let aucs: Vec<f64> = (0..ps.l()).filter_map(|j| label_auc(ps, j)).collect();
            if aucs.is_empty() {
                return Err(MetricsError::NoValidClass { mode: "macro" });
            }
            Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
        }
        AucMode::Weighted => {
            let counts = confusion(ps);
            let mut total_weight = 0.0;
            let mut acc = 0.0;
            for j in 0..ps.l() {
                if let Some(auc) = label_auc(ps, j) {
                    total_weight += counts.weights[j];
                    acc += counts.weights[j] * auc;
                }
            }
            if total_weight == 0.0 {
                return Err(MetricsError::NoValidClass { mode: "weighted" });
            }
            Ok(acc / total_weight)
        }
    }
}

/// One label's slice of the report.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LabelReport {
    pub label: String,
    pub support: usize,
    pub weight: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Absent when the label carries a single class.
    pub auc: Option<f64>,
}

/// Every metric for one prediction set, with the field names of the
/// symbols they report.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    #[serde(rename = "AvgAcc")]
    pub avg_acc: f64,
    #[serde(rename = "EMAcc")]
    pub em_acc: f64,
    #[serde(rename = "EMCount")]
    pub em_count: usize,
    #[serde(rename = "OE")]
    pub one_error: f64,
    #[serde(rename = "P_macro")]
    pub p_macro: f64,
    #[serde(rename = "R_macro")]
    pub r_macro: f64,
    #[serde(rename = "F1_macro")]
    pub f1_macro: f64,
    #[serde(rename = "P_weighted")]
    pub p_weighted: f64,
    #[serde(rename = "R_weighted")]
    pub r_weighted: f64,
    #[serde(rename = "F1_weighted")]
    pub f1_weighted: f64,
    #[serde(rename = "HM")]
    pub hamming: f64,
    #[serde(rename = "Js")]
    pub jaccard: f64,
    #[serde(rename = "AUC_micro")]
    pub auc_micro: Option<f64>,
    #[serde(rename = "AUC_macro")]
    pub auc_macro: Option<f64>,
    #[serde(rename = "AUC_weighted")]
    pub auc_weighted: Option<f64>,
    /// Labels excluded from macro/weighted AUC for missing a class.
    pub auc_excluded_labels: Vec<String>,
    pub n_samples: usize,
    pub per_label: Vec<LabelReport>,
}

/// Computes every metric over shared confusion counts. AUC modes that are
/// undefined for this set are reported as `None` rather than errors.
pub fn full_report(ps: &PredictionSet, label_names: &[String]) -> Result<MetricsReport, MetricsError> {
    assert_eq!(label_names.len(), ps.l(), "label names must match width");
    let counts = confusion(ps);
    let per = per_label_prf(&counts);
    let (em_acc, em_count) = exact_match(ps);
    let (p_macro, r_macro, f1_macro) = prf(&counts, Averaging::Macro);
    let (p_weighted, r_weighted, f1_weighted) = prf(&counts, Averaging::Weighted);

    let per_label: Vec<LabelReport> = (0..ps.l())
        .map(|j| LabelReport {
            label: label_names[j].clone(),
            support: counts.support[j],
            weight: counts.weights[j],
            tp: counts.tp[j],
            fp: counts.fp[j],
            fn_: counts.fn_[j],
            tn: counts.tn[j],
            precision: per[j].0,
            recall: per[j].1,
            f1: per[j].2,
            auc: label_auc(ps, j),
        })
        .collect();
    let auc_excluded_labels = per_label
        .iter()
        .filter(|r| r.auc.is_none())
        .map(|r| r.label.clone())
        .collect();

    Ok(MetricsReport {
        avg_acc: avg_accuracy(ps),
        em_acc,
        em_count,
        one_error: one_error(ps),
        p_macro,
        r_macro,
        f1_macro,
        p_weighted,
        r_weighted,
        f1_weighted,
        hamming: hamming_loss(ps),
        jaccard: jaccard(ps),
        auc_micro: roc_auc(ps, AucMode::Micro).ok(),
        auc_macro: roc_auc(ps, AucMode::Macro).ok(),
        auc_weighted: roc_auc(ps, AucMode::Weighted).ok(),
        auc_excluded_labels,
        n_samples: ps.n(),
        per_label,
    })
}

impl MetricsReport {
    /// Names of the columns used by [`MetricsReport::table_values`].
    pub const TABLE_COLUMNS: [&'static str; 13] = [
        "AvgAcc",
        "EMAcc",
        "#EM",
        "OE",
        "P_macro",
        "R_macro",
        "F1_macro",
        "P_weighted",
        "R_weighted",
        "F1_weighted",
        "HM",
        "Js",
        "AUC_weighted",
    ];

    /// Columns where larger is better (`false` marks loss-like columns).
    pub const TABLE_HIGHER_IS_BETTER: [bool; 13] = [
        true, true, true, false, true, true, true, true, true, true, false, true, true,
    ];

    pub fn table_values(&self) -> [f64; 13] {
        [
            self.avg_acc,
            self.em_acc,
            self.em_count as f64,
            self.one_error,
            self.p_macro,
            self.r_macro,
            self.f1_macro,
            self.p_weighted,
            self.r_weighted,
            self.f1_weighted,
            self.hamming,
            self.jaccard,
            self.auc_weighted.unwrap_or(f64::NAN),
        ]
    }
}
