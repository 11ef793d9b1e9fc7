//! Confusion matrices, per-class precision/recall, precision-recall curves,
//! average precision, and support-weighted reports.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::taxonomy::{LesionClass, LesionGroup};

/// Counts indexed `[true class][predicted class]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: Vec<String>,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<String>) -> Self {
        let k = classes.len();
        ConfusionMatrix {
            classes,
            counts: vec![vec![0; k]; k],
        }
    }

    /// Tallies class-index pairs.
    pub fn from_indices(classes: Vec<String>, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Size(format!(
                "{} true labels vs {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut cm = ConfusionMatrix::new(classes);
        let k = cm.classes.len();
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= k || p >= k {
                return Err(Error::Taxonomy(format!("class index {} of {k}", t.max(p))));
            }
            cm.counts[t][p] += 1;
        }
        Ok(cm)
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth][predicted]
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Ground-truth count of class `c`.
    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    /// Number of predictions of class `c`.
    pub fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    /// Grid CSV: header `true\predicted,<classes…>`, one row per true class.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for c in &self.classes {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (name, row) in self.classes.iter().zip(&self.counts) {
            out.push_str(name);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Tallies string labels against `classes`.
pub fn confusion_matrix<S: AsRef<str>>(
    truth: &[S],
    predicted: &[S],
    classes: &[S],
) -> Result<ConfusionMatrix> {
    let names: Vec<String> = classes.iter().map(|c| c.as_ref().to_string()).collect();
    let lookup = |label: &S| {
        names
            .iter()
            .position(|c| c == label.as_ref())
            .ok_or_else(|| Error::Taxonomy(label.as_ref().to_string()))
    };
    if truth.len() != predicted.len() {
        return Err(Error::Size(format!(
            "{} true labels vs {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let t = truth.iter().map(lookup).collect::<Result<Vec<_>>>()?;
    let p = predicted.iter().map(lookup).collect::<Result<Vec<_>>>()?;
    ConfusionMatrix::from_indices(names, &t, &p)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    /// `TP + FP = 0`; precision reported as 0.
    pub precision_undefined: bool,
    /// `TP + FN = 0`; recall reported as 0.
    pub recall_undefined: bool,
}

impl PrecisionRecall {
    pub fn degenerate(&self) -> bool {
        self.precision_undefined || self.recall_undefined
    }
}

/// `TP/(TP+FP)` and `TP/(TP+FN)` for class `c`.
pub fn precision_recall(cm: &ConfusionMatrix, c: usize) -> PrecisionRecall {
    let tp = cm.get(c, c);
    let fp = cm.col_sum(c) - tp;
    let fn_ = cm.row_sum(c) - tp;
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    PrecisionRecall {
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        precision_undefined: tp + fp == 0,
        recall_undefined: tp + fn_ == 0,
    }
}

/// Precision/recall at each distinct score threshold, highest first.
#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    pub class: String,
    pub thresholds: Vec<f64>,
    /// `(recall, precision)` after admitting every sample scoring at or above
    /// the matching threshold.
    pub points: Vec<(f64, f64)>,
}

impl PrCurve {
    /// CSV with header `threshold,recall,precision`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,recall,precision\n");
        for (t, (r, p)) in self.thresholds.iter().zip(&self.points) {
            let _ = writeln!(out, "{t:.6},{r:.6},{p:.6}");
        }
        out
    }
}

/// Sweeps thresholds over the distinct scores in descending order. Samples
/// sharing a score enter together.
pub fn pr_curve(class: &str, scores: &[f64], positive: &[bool]) -> Result<PrCurve> {
    if scores.len() != positive.len() {
        return Err(Error::Size(format!(
            "{} scores vs {} labels",
            scores.len(),
            positive.len()
        )));
    }
    let total_pos = positive.iter().filter(|&&p| p).count();
    if total_pos == 0 {
        return Err(Error::UndefinedRecall(format!(
            "class {class:?} has no positive samples"
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Degenerate("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut thresholds = Vec::new();
    let mut points = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            seen += 1;
            tp += positive[order[i]] as usize;
            i += 1;
        }
        thresholds.push(t);
        points.push((tp as f64 / total_pos as f64, tp as f64 / seen as f64));
    }
    Ok(PrCurve {
        class: class.to_string(),
        thresholds,
        points,
    })
}

/// `sum_n (R_n - R_{n-1}) P_n` with `R_0 = 0`, without interpolation.
pub fn average_precision(curve: &PrCurve) -> f64 {
    let mut prev = 0.0;
    let mut ap = 0.0;
    for &(r, p) in &curve.points {
        ap += (r - prev) * p;
        prev = r;
    }
    ap
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub class: String,
    pub support: u64,
    pub precision: f64,
    pub recall: f64,
    pub ap: f64,
}

/// Per-class rows plus support-weighted (headline) and unweighted aggregates.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<ReportRow>,
    pub weighted: ReportRow,
    pub macro_avg: ReportRow,
}

impl MetricsReport {
    /// CSV with header `class,support,precision,recall,ap`, the class rows,
    /// then `weighted` and `macro`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,support,precision,recall,ap\n");
        for r in self.rows.iter().chain([&self.weighted, &self.macro_avg]) {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6}",
                r.class, r.support, r.precision, r.recall, r.ap
            );
        }
        out
    }
}

pub fn aggregate_report(rows: Vec<ReportRow>) -> Result<MetricsReport> {
    if rows.is_empty() {
        return Err(Error::Degenerate("report needs at least one row".into()));
    }
    let total: u64 = rows.iter().map(|r| r.support).sum();
    if total == 0 {
        return Err(Error::Degenerate("all supports are zero".into()));
    }
    let weighted = |f: fn(&ReportRow) -> f64| {
        rows.iter().map(|r| r.support as f64 * f(r)).sum::<f64>() / total as f64
    };
    let mean = |f: fn(&ReportRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    let weighted_row = ReportRow {
        class: "weighted".into(),
        support: total,
        precision: weighted(|r| r.precision),
        recall: weighted(|r| r.recall),
        ap: weighted(|r| r.ap),
    };
    let macro_row = ReportRow {
        class: "macro".into(),
        support: total,
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        ap: mean(|r| r.ap),
    };
    Ok(MetricsReport {
        rows,
        weighted: weighted_row,
        macro_avg: macro_row,
    })
}

/// Three-way group of a seven-class label name.
pub fn map_to_3class(label: &str) -> Result<LesionGroup> {
    Ok(label.parse::<LesionClass>()?.group())
}
