//! Confusion matrices, one-vs-rest per-class metrics, ROC curves and AUC.
//!
//! Metrics are kept as exact integer ratios; a zero denominator evaluates to
//! 0 and marks the metric undefined rather than producing NaN.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::dataset::GradeLabel;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("label lists differ in length ({truth} vs {predicted})")]
    LengthMismatch { truth: usize, predicted: usize },
    #[error("no samples to evaluate")]
    Empty,
    #[error("class index {index} out of range for {classes} classes")]
    IndexOutOfRange { index: usize, classes: usize },
    #[error("class {class} has no {missing} samples; ROC is undefined")]
    DegenerateClass { class: usize, missing: &'static str },
    #[error("malformed metrics table: {0}")]
    MalformedTable(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_order: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(class_order: Vec<String>) -> Self {
        let k = class_order.len();
        ConfusionMatrix { class_order, counts: vec![vec![0; k]; k] }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Self {
        let class_order = if counts.len() == GradeLabel::ALL.len() {
            GradeLabel::class_names()
        } else {
            (0..counts.len()).map(|i| format!("class {i}")).collect()
        };
        ConfusionMatrix { class_order, counts }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }
}

pub fn confusion_matrix(truth: &[GradeLabel], predicted: &[GradeLabel]) -> Result<ConfusionMatrix, EvalError> {
    let t: Vec<usize> = truth.iter().map(|l| l.index()).collect();
    let p: Vec<usize> = predicted.iter().map(|l| l.index()).collect();
    let mut cm = confusion_matrix_indices(&t, &p, GradeLabel::ALL.len())?;
    cm.class_order = GradeLabel::class_names();
    Ok(cm)
}

pub fn confusion_matrix_indices(truth: &[usize], predicted: &[usize], classes: usize) -> Result<ConfusionMatrix, EvalError> {
    if truth.len() != predicted.len() {
        return Err(EvalError::LengthMismatch { truth: truth.len(), predicted: predicted.len() });
    }
    if truth.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut cm = ConfusionMatrix::from_counts(vec![vec![0; classes]; classes]);
    for (&t, &p) in truth.iter().zip(predicted) {
        for index in [t, p] {
            if index >= classes {
                return Err(EvalError::IndexOutOfRange { index, classes });
            }
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OvrCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

pub fn one_vs_rest_counts(cm: &ConfusionMatrix, class: usize) -> Result<OvrCounts, EvalError> {
    if class >= cm.num_classes() {
        return Err(EvalError::IndexOutOfRange { index: class, classes: cm.num_classes() });
    }
    let tp = cm.counts[class][class];
    let fn_ = cm.row_sum(class) - tp;
    let fp = cm.col_sum(class) - tp;
    let tn = cm.total() - tp - fp - fn_;
    Ok(OvrCounts { tp, fp, fn_, tn })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MetricKind {
    #[serde(rename = "TPR")]
    Tpr,
    #[serde(rename = "TNR")]
    Tnr,
    #[serde(rename = "PPV")]
    Ppv,
    #[serde(rename = "NPV")]
    Npv,
    #[serde(rename = "FPR")]
    Fpr,
    #[serde(rename = "FNR")]
    Fnr,
    #[serde(rename = "FDR")]
    Fdr,
    #[serde(rename = "ACC")]
    Acc,
}

impl MetricKind {
    pub const ALL: [MetricKind; 8] = [
        MetricKind::Tpr,
        MetricKind::Tnr,
        MetricKind::Ppv,
        MetricKind::Npv,
        MetricKind::Fpr,
        MetricKind::Fnr,
        MetricKind::Fdr,
        MetricKind::Acc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Tpr => "TPR",
            MetricKind::Tnr => "TNR",
            MetricKind::Ppv => "PPV",
            MetricKind::Npv => "NPV",
            MetricKind::Fpr => "FPR",
            MetricKind::Fnr => "FNR",
            MetricKind::Fdr => "FDR",
            MetricKind::Acc => "ACC",
        }
    }

    /// Error rates, where a smaller value is the better one.
    pub fn lower_is_better(self) -> bool {
        matches!(self, MetricKind::Fpr | MetricKind::Fnr | MetricKind::Fdr)
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| EvalError::MalformedTable(format!("unknown metric `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Self {
        Ratio { num, den }
    }

    pub fn is_defined(self) -> bool {
        self.den != 0
    }

    pub fn value(self) -> f64 {
        if self.den == 0 {
            0.0
        } else {
            self.num as f64 / self.den as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMetricsRow {
    pub class_index: usize,
    pub counts: OvrCounts,
    pub ratios: Vec<(MetricKind, Ratio)>,
}

impl ClassMetricsRow {
    pub fn ratio(&self, kind: MetricKind) -> Ratio {
        self.ratios.iter().find(|(k, _)| *k == kind).map(|(_, r)| *r).expect("all metrics present")
    }

    pub fn value(&self, kind: MetricKind) -> f64 {
        self.ratio(kind).value()
    }

    /// Metrics whose denominator was zero.
    pub fn undefined(&self) -> Vec<MetricKind> {
        self.ratios.iter().filter(|(_, r)| !r.is_defined()).map(|(k, _)| *k).collect()
    }
}

pub fn class_metrics(cm: &ConfusionMatrix, class: usize) -> Result<ClassMetricsRow, EvalError> {
    let c = one_vs_rest_counts(cm, class)?;
    let OvrCounts { tp, fp, fn_, tn } = c;
    let ratios = vec![
        (MetricKind::Tpr, Ratio::new(tp, tp + fn_)),
        (MetricKind::Tnr, Ratio::new(tn, tn + fp)),
        (MetricKind::Ppv, Ratio::new(tp, tp + fp)),
        (MetricKind::Npv, Ratio::new(tn, tn + fn_)),
        (MetricKind::Fpr, Ratio::new(fp, fp + tn)),
        (MetricKind::Fnr, Ratio::new(fn_, fn_ + tp)),
        (MetricKind::Fdr, Ratio::new(fp, fp + tp)),
        (MetricKind::Acc, Ratio::new(tp + tn, tp + tn + fp + fn_)),
    ];
    Ok(ClassMetricsRow { class_index: class, counts: c, ratios })
}

pub fn overall_accuracy(cm: &ConfusionMatrix) -> Result<f64, EvalError> {
    match cm.total() {
        0 => Err(EvalError::Empty),
        total => Ok(cm.trace() as f64 / total as f64),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub class_order: Vec<String>,
    pub rows: Vec<ClassMetricsRow>,
    /// Unweighted mean over classes, in [`MetricKind::ALL`] order.
    pub macro_mean: Vec<(MetricKind, f64)>,
    pub overall_accuracy: f64,
}

impl MetricsTable {
    pub fn values(&self, kind: MetricKind) -> Vec<f64> {
        self.rows.iter().map(|r| r.value(kind)).collect()
    }
}

pub fn metrics_table(cm: &ConfusionMatrix) -> Result<MetricsTable, EvalError> {
    let overall = overall_accuracy(cm)?;
    let rows = (0..cm.num_classes()).map(|c| class_metrics(cm, c)).collect::<Result<Vec<_>, _>>()?;
    let macro_mean = MetricKind::ALL
        .iter()
        .map(|&k| (k, rows.iter().map(|r| r.value(k)).sum::<f64>() / rows.len() as f64))
        .collect();
    Ok(MetricsTable { class_order: cm.class_order.clone(), rows, macro_mean, overall_accuracy: overall })
}

/// One-vs-rest ROC curve. `thresholds[0]` is `+inf`, giving the point (0, 0).
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub thresholds: Vec<f64>,
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
    pub auc: f64,
}

#[derive(Serialize, Deserialize)]
struct RocRepr {
    auc: f64,
    /// `(threshold, fpr, tpr)`; the infinite threshold is stored as null.
    points: Vec<(Option<f64>, f64, f64)>,
}

impl Serialize for RocCurve {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let points = self
            .thresholds
            .iter()
            .zip(&self.fpr)
            .zip(&self.tpr)
            .map(|((&t, &f), &p)| (t.is_finite().then_some(t), f, p))
            .collect();
        RocRepr { auc: self.auc, points }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for RocCurve {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = RocRepr::deserialize(d)?;
        Ok(RocCurve {
            thresholds: repr.points.iter().map(|p| p.0.unwrap_or(f64::INFINITY)).collect(),
            fpr: repr.points.iter().map(|p| p.1).collect(),
            tpr: repr.points.iter().map(|p| p.2).collect(),
            auc: repr.auc,
        })
    }
}

/// ROC for scores against binary truth; thresholds are the unique scores,
/// descending, and a sample counts as positive when `score >= threshold`.
pub fn roc_binary(scores: &[f64], positive: &[bool]) -> Result<RocCurve, EvalError> {
    if scores.len() != positive.len() {
        return Err(EvalError::LengthMismatch { truth: positive.len(), predicted: scores.len() });
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 {
        return Err(EvalError::DegenerateClass { class: 0, missing: "positive" });
    }
    if n_neg == 0 {
        return Err(EvalError::DegenerateClass { class: 0, missing: "negative" });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut thresholds = vec![f64::INFINITY];
    let mut fpr = vec![0.0];
    let mut tpr = vec![0.0];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        thresholds.push(t);
        fpr.push(fp as f64 / n_neg as f64);
        tpr.push(tp as f64 / n_pos as f64);
    }
    let auc = fpr.windows(2).zip(tpr.windows(2)).map(|(f, t)| (f[1] - f[0]) * (t[1] + t[0]) / 2.0).sum();
    Ok(RocCurve { thresholds, fpr, tpr, auc })
}

/// One-vs-rest ROC for `class`, scored by its softmax probability.
pub fn roc_curve(scores: &Array2<f64>, truth: &[GradeLabel], class: usize) -> Result<RocCurve, EvalError> {
    if class >= scores.ncols() {
        return Err(EvalError::IndexOutOfRange { index: class, classes: scores.ncols() });
    }
    if scores.nrows() != truth.len() {
        return Err(EvalError::LengthMismatch { truth: truth.len(), predicted: scores.nrows() });
    }
    let column: Vec<f64> = scores.column(class).to_vec();
    let positive: Vec<bool> = truth.iter().map(|l| l.index() == class).collect();
    roc_binary(&column, &positive).map_err(|e| match e {
        EvalError::DegenerateClass { missing, .. } => EvalError::DegenerateClass { class, missing },
        other => other,
    })
}

/// One model's section of a Table-1-shaped CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSheet {
    pub model: String,
    pub class_order: Vec<String>,
    pub values: Vec<(MetricKind, Vec<f64>)>,
}

impl MetricsSheet {
    pub fn from_table(model: &str, table: &MetricsTable) -> Self {
        MetricsSheet {
            model: model.to_string(),
            class_order: table.class_order.clone(),
            values: MetricKind::ALL.iter().map(|&k| (k, table.values(k))).collect(),
        }
    }

    pub fn get(&self, kind: MetricKind) -> Option<&[f64]> {
        self.values.iter().find(|(k, _)| *k == kind).map(|(_, v)| v.as_slice())
    }
}

/// Writes `model,metric,<class>...` rows with values at two decimals.
pub fn write_metrics_csv<W: Write>(sheets: &[MetricsSheet], out: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    let class_order = sheets.first().map(|s| s.class_order.clone()).unwrap_or_else(GradeLabel::class_names);
    let mut header = vec!["model".to_string(), "metric".to_string()];
    header.extend(class_order);
    w.write_record(&header)?;
    for sheet in sheets {
        for (kind, values) in &sheet.values {
            let mut row = vec![sheet.model.clone(), kind.name().to_string()];
            row.extend(values.iter().map(|v| format!("{v:.2}")));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(input: R) -> Result<Vec<MetricsSheet>, EvalError> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    if header.len() < 3 || &header[0] != "model" || &header[1] != "metric" {
        return Err(EvalError::MalformedTable("header must start with `model,metric`".into()));
    }
    let class_order: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
    let mut sheets: Vec<MetricsSheet> = Vec::new();
    for (line, record) in r.records().enumerate() {
        let record = record?;
        if record.len() != header.len() {
            return Err(EvalError::MalformedTable(format!("row {} has {} fields", line + 2, record.len())));
        }
        let kind: MetricKind = record[1].parse()?;
        let values = record
            .iter()
            .skip(2)
            .map(|v| v.trim().parse::<f64>().map_err(|_| EvalError::MalformedTable(format!("bad number `{v}`"))))
            .collect::<Result<Vec<_>, _>>()?;
        let model = &record[0];
        match sheets.last_mut() {
            Some(s) if s.model == model => s.values.push((kind, values)),
            _ => sheets.push(MetricsSheet {
                model: model.to_string(),
                class_order: class_order.clone(),
                values: vec![(kind, values)],
            }),
        }
    }
    Ok(sheets)
}
