//! Run records, report bundles, figures and cross-run comparison.
//!
//! Figures are a thin rendering layer: every plotted number is also written
//! to a sidecar next to the image, and tests assert on sidecars only.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use plotters::prelude::*;
use plotters::style::FontStyle;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eval::{write_metrics_csv, ConfusionMatrix, EvalError, MetricKind, MetricsSheet, MetricsTable, RocCurve};
use crate::model::{BackboneSpec, HeadSpec};
use crate::train::{TrainConfig, TrainError, TrainingHistory};

pub const RECORD_FILE: &str = "record.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics_full.json";
pub const HISTORY_CSV: &str = "history.csv";
pub const FIG_ACC: &str = "fig_acc.png";
pub const FIG_LOSS: &str = "fig_loss.png";
pub const FIG_CONFUSION: &str = "fig_confusion.png";
pub const FIG_ROC: &str = "fig_roc.png";
const LOCK_FILE: &str = ".lock";

/// Environment variable naming a TrueType font for figure text.
pub const FONT_ENV: &str = "RETINO_BENCH_FONT";
const FONT_CANDIDATES: [&str; 4] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/Library/Fonts/Arial.ttf",
];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("incomplete record: {0}")]
    IncompleteRecord(String),
    #[error("training history is empty")]
    EmptyHistory,
    #[error("run directory {0} is locked by another writer")]
    Locked(PathBuf),
    #[error("no usable font for figure text; set {FONT_ENV}")]
    FontUnavailable,
    #[error("rendering {path} failed: {message}")]
    Render { path: PathBuf, message: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io { path: path.to_path_buf(), source }
}

/// The full reproducibility context of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfigRecord {
    pub train: TrainConfig,
    pub backbone: BackboneSpec,
    pub head: HeadSpec,
    pub head_init: String,
    pub head_init_seed: u64,
    pub split_fraction: f64,
    pub split_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub source_id: String,
    pub fingerprint: String,
    pub train_counts: BTreeMap<String, usize>,
    pub validation_counts: BTreeMap<String, usize>,
}

/// ROC for one class; `curve` is absent when the class has no positive or
/// no negative samples in the evaluation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocEntry {
    pub class_name: String,
    pub curve: Option<RocCurve>,
    pub undefined_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub run_id: String,
    pub model_name: String,
    pub config: RunConfigRecord,
    pub dataset: DatasetSummary,
    pub backbone_fingerprint: String,
    pub history: TrainingHistory,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricsTable,
    pub roc: Vec<RocEntry>,
    pub artifact_paths: BTreeMap<String, String>,
    pub started_at: String,
    pub finished_at: String,
}

impl ExperimentRecord {
    pub fn check_complete(&self) -> Result<(), ReportError> {
        let k = self.confusion.num_classes();
        if self.confusion.total() == 0 {
            return Err(ReportError::IncompleteRecord("confusion matrix is empty".into()));
        }
        if self.metrics.rows.len() != k || self.roc.len() != k {
            return Err(ReportError::IncompleteRecord(format!(
                "{} metric rows and {} ROC entries for {k} classes",
                self.metrics.rows.len(),
                self.roc.len()
            )));
        }
        if self.run_id.is_empty() {
            return Err(ReportError::IncompleteRecord("missing run id".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ReportError> {
        let text = fs::read(path).map_err(io_err(path))?;
        Ok(serde_json::from_slice(&text)?)
    }
}

/// `<hash prefix>-<UTC timestamp>`, where the hash covers the config, the
/// seeds it contains and the dataset fingerprint.
pub fn make_run_id(config: &RunConfigRecord, dataset_fingerprint: &str, now: chrono::DateTime<chrono::Utc>) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).expect("config serializes"));
    h.update(dataset_fingerprint.as_bytes());
    let digest = hex::encode(h.finalize());
    format!("{}-{}", &digest[..12], now.format("%Y%m%dT%H%M%SZ"))
}

/// Creates `root/<run_id>`, appending `-2`, `-3`, … on collision.
pub fn allocate_run_dir(root: &Path, run_id: &str) -> Result<(String, PathBuf), ReportError> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    for n in 1.. {
        let id = if n == 1 { run_id.to_string() } else { format!("{run_id}-{n}") };
        let dir = root.join(&id);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok((id, dir)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(io_err(&dir)(e)),
        }
    }
    unreachable!()
}

/// Exclusive writer lock on a run directory, released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self, ReportError> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(ReportError::Locked(dir.to_path_buf())),
            Err(e) => Err(io_err(&path)(e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn ensure_font() -> Result<(), ReportError> {
    static FONT: OnceLock<bool> = OnceLock::new();
    let ok = *FONT.get_or_init(|| {
        let env = std::env::var_os(FONT_ENV).map(PathBuf::from);
        let candidates = env.into_iter().chain(FONT_CANDIDATES.iter().map(PathBuf::from));
        for path in candidates {
            if let Ok(bytes) = fs::read(&path) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                    return true;
                }
            }
        }
        false
    });
    if ok {
        Ok(())
    } else {
        Err(ReportError::FontUnavailable)
    }
}

fn render_err(path: &Path) -> impl Fn(String) -> ReportError + '_ {
    move |message| ReportError::Render { path: path.to_path_buf(), message }
}

macro_rules! draw {
    ($path:expr, $e:expr) => {
        $e.map_err(|e| render_err($path)(e.to_string()))?
    };
}

const SERIES_COLORS: [RGBColor; 5] =
    [RGBColor(31, 119, 180), RGBColor(255, 127, 14), RGBColor(44, 160, 44), RGBColor(214, 39, 40), RGBColor(148, 103, 189)];

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ReportError> {
    fs::write(path, bytes).map_err(io_err(path))
}

/// Figures paired with the sidecar holding their plotted values.
#[derive(Debug, Clone, PartialEq)]
pub struct Figure {
    pub image: Option<PathBuf>,
    pub sidecar: PathBuf,
}

fn curve_sidecar(history: &TrainingHistory, loss: bool) -> Result<Vec<u8>, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let (a, b) = if loss { ("train_loss", "val_loss") } else { ("train_acc", "val_acc") };
    w.write_record(["epoch", a, b])?;
    for e in &history.epochs {
        let (t, v) = if loss { (e.train_loss, e.val_loss) } else { (e.train_accuracy, e.val_accuracy) };
        w.write_record([e.epoch.to_string(), t.to_string(), v.to_string()])?;
    }
    w.into_inner().map_err(|e| ReportError::Render { path: PathBuf::new(), message: e.to_string() })
}

/// Accuracy and loss curves, train and validation, against epoch.
pub fn plot_training_curves(history: &TrainingHistory, out_dir: &Path) -> Result<(Figure, Figure), ReportError> {
    if history.is_empty() {
        return Err(ReportError::EmptyHistory);
    }
    let acc = plot_curve(history, out_dir, false)?;
    let loss = plot_curve(history, out_dir, true)?;
    Ok((acc, loss))
}

fn plot_curve(history: &TrainingHistory, out_dir: &Path, loss: bool) -> Result<Figure, ReportError> {
    let (file, title, y_desc) = if loss {
        (FIG_LOSS, "Training and Validation Loss", "Loss")
    } else {
        (FIG_ACC, "Training and Validation Accuracy", "Accuracy")
    };
    let image = out_dir.join(file);
    let sidecar = image.with_extension("csv");
    write_file(&sidecar, &curve_sidecar(history, loss)?)?;
    if ensure_font().is_err() {
        log::warn!("no font available; skipping {}", image.display());
        return Ok(Figure { image: None, sidecar });
    }

    let pick = |e: &crate::train::EpochRecord| if loss { (e.train_loss, e.val_loss) } else { (e.train_accuracy, e.val_accuracy) };
    let n = history.len() as f64;
    let y_max = if loss {
        history.epochs.iter().map(|e| pick(e).0.max(pick(e).1)).fold(0.0, f64::max).max(1e-3) * 1.1
    } else {
        1.0
    };
    {
        let root = BitMapBackend::new(&image, (800, 560)).into_drawing_area();
        draw!(&image, root.fill(&WHITE));
        let mut chart = draw!(
            &image,
            ChartBuilder::on(&root)
                .caption(title, ("sans-serif", 26))
                .margin(16)
                .x_label_area_size(44)
                .y_label_area_size(60)
                .build_cartesian_2d(0.5f64..n + 0.5, 0.0f64..y_max)
        );
        draw!(
            &image,
            chart
                .configure_mesh()
                .x_desc("Epoch")
                .y_desc(y_desc)
                .x_labels(history.len().min(20))
                .x_label_formatter(&|x| format!("{x:.0}"))
                .draw()
        );
        for (i, name) in ["Train", "Validation"].iter().enumerate() {
            let color = SERIES_COLORS[i];
            let points: Vec<(f64, f64)> = history
                .epochs
                .iter()
                .map(|e| (e.epoch as f64, if i == 0 { pick(e).0 } else { pick(e).1 }))
                .collect();
            draw!(&image, chart.draw_series(LineSeries::new(points.clone(), color.stroke_width(2))))
                .label(*name)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
            draw!(&image, chart.draw_series(points.into_iter().map(|p| Circle::new(p, 3, color.filled()))));
        }
        draw!(
            &image,
            chart.configure_series_labels().background_style(WHITE.mix(0.85)).border_style(BLACK).draw()
        );
        draw!(&image, root.present());
    }
    Ok(Figure { image: Some(image), sidecar })
}

/// Heatmap with counts in every cell; rows are true classes.
pub fn plot_confusion_matrix(cm: &ConfusionMatrix, out_path: &Path) -> Result<Figure, ReportError> {
    let sidecar = out_path.with_extension("csv");
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["true\\predicted".to_string()];
    header.extend(cm.class_order.iter().cloned());
    w.write_record(&header)?;
    for (name, row) in cm.class_order.iter().zip(&cm.counts) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(u64::to_string));
        w.write_record(&rec)?;
    }
    write_file(&sidecar, &w.into_inner().map_err(|e| render_err(out_path)(e.to_string()))?)?;
    if ensure_font().is_err() {
        log::warn!("no font available; skipping {}", out_path.display());
        return Ok(Figure { image: None, sidecar });
    }

    let k = cm.num_classes() as i32;
    let (left, top, cell) = (150i32, 70i32, 100i32);
    let size = ((left + k * cell + 40) as u32, (top + k * cell + 90) as u32);
    let max = cm.counts.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
    {
        let root = BitMapBackend::new(out_path, size).into_drawing_area();
        draw!(out_path, root.fill(&WHITE));
        let title = ("sans-serif", 26).into_font().color(&BLACK);
        draw!(out_path, root.draw(&Text::new("Confusion Matrix", (left, 20), title)));
        let label = ("sans-serif", 14).into_font().color(&BLACK);
        for (r, row) in cm.counts.iter().enumerate() {
            for (c, &count) in row.iter().enumerate() {
                let t = count as f64 / max;
                let fill = RGBColor((247.0 - 239.0 * t) as u8, (251.0 - 203.0 * t) as u8, (255.0 - 148.0 * t) as u8);
                let (x0, y0) = (left + c as i32 * cell, top + r as i32 * cell);
                draw!(out_path, root.draw(&Rectangle::new([(x0, y0), (x0 + cell, y0 + cell)], fill.filled())));
                draw!(out_path, root.draw(&Rectangle::new([(x0, y0), (x0 + cell, y0 + cell)], BLACK.mix(0.3))));
                let ink = if t > 0.55 { WHITE } else { BLACK };
                let text = count.to_string();
                let style = ("sans-serif", 22).into_font().color(&ink);
                let dx = 6 * text.len() as i32;
                draw!(out_path, root.draw(&Text::new(text, (x0 + cell / 2 - dx, y0 + cell / 2 - 11), style)));
            }
        }
        for (i, name) in cm.class_order.iter().enumerate() {
            let i = i as i32;
            draw!(out_path, root.draw(&Text::new(name.clone(), (10, top + i * cell + cell / 2 - 7), label.clone())));
            draw!(out_path, root.draw(&Text::new(name.clone(), (left + i * cell + 6, top + k * cell + 10), label.clone())));
        }
        let axis = ("sans-serif", 16).into_font().color(&BLACK);
        draw!(out_path, root.draw(&Text::new("Predicted label", (left + k * cell / 2 - 60, top + k * cell + 45), axis.clone())));
        draw!(out_path, root.draw(&Text::new("True label", (10, top - 30), axis)));
        draw!(out_path, root.present());
    }
    Ok(Figure { image: Some(out_path.to_path_buf()), sidecar })
}

/// Legend text for one class curve; AUC to three decimals.
pub fn roc_legend(entry: &RocEntry) -> String {
    match &entry.curve {
        Some(c) => format!("{} (AUC = {:.3})", entry.class_name, c.auc),
        None => format!("{} (AUC undefined)", entry.class_name),
    }
}

/// Per-class ROC curves with the chance diagonal.
pub fn plot_roc(curves: &[RocEntry], out_path: &Path) -> Result<Figure, ReportError> {
    let sidecar = out_path.with_extension("json");
    let side: Vec<serde_json::Value> = curves
        .iter()
        .map(|e| serde_json::json!({ "class": e.class_name, "legend": roc_legend(e), "curve": e.curve }))
        .collect();
    write_file(&sidecar, &serde_json::to_vec_pretty(&side)?)?;
    if ensure_font().is_err() {
        log::warn!("no font available; skipping {}", out_path.display());
        return Ok(Figure { image: None, sidecar });
    }
    {
        let root = BitMapBackend::new(out_path, (760, 640)).into_drawing_area();
        draw!(out_path, root.fill(&WHITE));
        let mut chart = draw!(
            out_path,
            ChartBuilder::on(&root)
                .caption("ROC Curve", ("sans-serif", 26))
                .margin(16)
                .x_label_area_size(44)
                .y_label_area_size(56)
                .build_cartesian_2d(0.0f64..1.0, 0.0f64..1.0)
        );
        draw!(out_path, chart.configure_mesh().x_desc("False Positive Rate").y_desc("True Positive Rate").draw());
        draw!(
            out_path,
            chart.draw_series(DashedLineSeries::new(vec![(0.0, 0.0), (1.0, 1.0)], 6, 4, BLACK.mix(0.5).stroke_width(1)))
        )
        .label("Chance")
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], BLACK.mix(0.5)));
        for (i, entry) in curves.iter().enumerate() {
            let Some(curve) = &entry.curve else { continue };
            let color = SERIES_COLORS[i % SERIES_COLORS.len()];
            let points: Vec<(f64, f64)> = curve.fpr.iter().copied().zip(curve.tpr.iter().copied()).collect();
            draw!(out_path, chart.draw_series(LineSeries::new(points, color.stroke_width(2))))
                .label(roc_legend(entry))
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        }
        draw!(
            out_path,
            chart
                .configure_series_labels()
                .position(SeriesLabelPosition::LowerRight)
                .background_style(WHITE.mix(0.85))
                .border_style(BLACK)
                .draw()
        );
        draw!(out_path, root.present());
    }
    Ok(Figure { image: Some(out_path.to_path_buf()), sidecar })
}

#[derive(Serialize)]
struct FullMetrics<'a> {
    model: &'a str,
    overall_accuracy: f64,
    class_order: &'a [String],
    per_class: Vec<BTreeMap<&'static str, serde_json::Value>>,
    macro_mean: BTreeMap<&'static str, f64>,
    roc: &'a [RocEntry],
}

fn full_metrics_json(model: &str, metrics: &MetricsTable, roc: &[RocEntry]) -> Result<Vec<u8>, ReportError> {
    let per_class = metrics
        .rows
        .iter()
        .map(|row| {
            let mut m = BTreeMap::new();
            m.insert("class", serde_json::json!(metrics.class_order[row.class_index]));
            m.insert("counts", serde_json::to_value(row.counts).expect("counts"));
            for kind in MetricKind::ALL {
                m.insert(kind.name(), serde_json::json!(row.value(kind)));
            }
            m.insert("undefined", serde_json::to_value(row.undefined()).expect("kinds"));
            m
        })
        .collect();
    let full = FullMetrics {
        model,
        overall_accuracy: metrics.overall_accuracy,
        class_order: &metrics.class_order,
        per_class,
        macro_mean: metrics.macro_mean.iter().map(|(k, v)| (k.name(), *v)).collect(),
        roc,
    };
    Ok(serde_json::to_vec_pretty(&full)?)
}

/// Metrics-only bundle: Table-1 CSV, full JSON, confusion and ROC figures.
pub fn write_metrics_bundle(
    model_name: &str,
    confusion: &ConfusionMatrix,
    metrics: &MetricsTable,
    roc: &[RocEntry],
    out_dir: &Path,
) -> Result<BTreeMap<String, String>, ReportError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut paths = BTreeMap::new();
    let csv_path = out_dir.join(METRICS_CSV);
    let file = File::create(&csv_path).map_err(io_err(&csv_path))?;
    write_metrics_csv(&[MetricsSheet::from_table(model_name, metrics)], BufWriter::new(file))?;
    paths.insert("metrics_csv".into(), METRICS_CSV.into());
    write_file(&out_dir.join(METRICS_JSON), &full_metrics_json(model_name, metrics, roc)?)?;
    paths.insert("metrics_full_json".into(), METRICS_JSON.into());
    let mut add = |key: &str, fig: Figure| {
        if let Some(img) = fig.image {
            paths.insert(key.to_string(), file_name(&img));
        }
        paths.insert(format!("{key}_data"), file_name(&fig.sidecar));
    };
    add("fig_confusion", plot_confusion_matrix(confusion, &out_dir.join(FIG_CONFUSION))?);
    add("fig_roc", plot_roc(roc, &out_dir.join(FIG_ROC))?);
    Ok(paths)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Writes the complete bundle for `record` into `out_dir` and fills in
/// `record.artifact_paths` (relative to `out_dir`). Re-running on the same
/// record rewrites identical sidecars.
pub fn emit_report(record: &mut ExperimentRecord, out_dir: &Path) -> Result<(), ReportError> {
    record.check_complete()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let _lock = RunLock::acquire(out_dir)?;

    let mut paths =
        write_metrics_bundle(&record.model_name, &record.confusion, &record.metrics, &record.roc, out_dir)?;
    let history_path = out_dir.join(HISTORY_CSV);
    let file = File::create(&history_path).map_err(io_err(&history_path))?;
    record.history.write_csv(BufWriter::new(file))?;
    paths.insert("history_csv".into(), HISTORY_CSV.into());
    if !record.history.is_empty() {
        let (acc, loss) = plot_training_curves(&record.history, out_dir)?;
        for (key, fig) in [("fig_acc", acc), ("fig_loss", loss)] {
            if let Some(img) = fig.image {
                paths.insert(key.into(), file_name(&img));
            }
            paths.insert(format!("{key}_data"), file_name(&fig.sidecar));
        }
    }
    paths.insert("record_json".into(), RECORD_FILE.into());
    record.artifact_paths.extend(paths);
    let record_path = out_dir.join(RECORD_FILE);
    write_file(&record_path, &serde_json::to_vec_pretty(record)?)?;
    Ok(())
}

/// Winner for one metric and class (or `"macro"`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestEntry {
    pub metric: MetricKind,
    pub class_name: String,
    pub model: String,
    pub run_id: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub sheets: Vec<MetricsSheet>,
    pub best: Vec<BestEntry>,
    /// Set when the records were evaluated on different datasets.
    pub mixed_datasets: bool,
}

/// Merges the records' metric tables in the order given and picks the best
/// run per metric and class: highest value, or lowest for FPR, FNR and FDR.
/// Ties go to the lexicographically smallest run id.
pub fn compare_runs(records: &[ExperimentRecord]) -> Result<Comparison, ReportError> {
    if records.is_empty() {
        return Err(ReportError::IncompleteRecord("nothing to compare".into()));
    }
    for r in records {
        r.check_complete()?;
    }
    let duplicate = |name: &str| records.iter().filter(|r| r.model_name == name).count() > 1;
    let labels: Vec<String> = records
        .iter()
        .map(|r| if duplicate(&r.model_name) { format!("{} [{}]", r.model_name, r.run_id) } else { r.model_name.clone() })
        .collect();
    let sheets: Vec<MetricsSheet> =
        records.iter().zip(&labels).map(|(r, l)| MetricsSheet::from_table(l, &r.metrics)).collect();

    let class_order = records[0].metrics.class_order.clone();
    let mut best = Vec::new();
    for kind in MetricKind::ALL {
        let columns = class_order.len();
        for col in 0..=columns {
            let value_of = |r: &ExperimentRecord| -> f64 {
                if col < columns {
                    r.metrics.rows[col].value(kind)
                } else {
                    r.metrics.macro_mean.iter().find(|(k, _)| *k == kind).map(|(_, v)| *v).unwrap_or(0.0)
                }
            };
            let mut winner = 0;
            for i in 1..records.len() {
                let (v, w) = (value_of(&records[i]), value_of(&records[winner]));
                let better = if kind.lower_is_better() { v < w } else { v > w };
                if better || (v == w && records[i].run_id < records[winner].run_id) {
                    winner = i;
                }
            }
            best.push(BestEntry {
                metric: kind,
                class_name: if col < columns { class_order[col].clone() } else { "macro".into() },
                model: labels[winner].clone(),
                run_id: records[winner].run_id.clone(),
                value: value_of(&records[winner]),
            });
        }
    }
    let mixed_datasets = records.iter().any(|r| r.dataset.fingerprint != records[0].dataset.fingerprint);
    Ok(Comparison { sheets, best, mixed_datasets })
}

pub const COMPARISON_CSV: &str = "comparison.csv";
pub const BEST_CSV: &str = "best_models.csv";

pub fn write_comparison(cmp: &Comparison, out_dir: &Path) -> Result<(PathBuf, PathBuf), ReportError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let table = out_dir.join(COMPARISON_CSV);
    let file = File::create(&table).map_err(io_err(&table))?;
    write_metrics_csv(&cmp.sheets, BufWriter::new(file))?;
    let best_path = out_dir.join(BEST_CSV);
    let mut w = csv::Writer::from_path(&best_path)?;
    w.write_record(["metric", "class", "direction", "best_model", "run_id", "value"])?;
    for b in &cmp.best {
        let direction = if b.metric.lower_is_better() { "min" } else { "max" };
        w.write_record([b.metric.name(), &b.class_name, direction, &b.model, &b.run_id, &format!("{:.4}", b.value)])?;
    }
    w.flush().map_err(io_err(&best_path))?;
    Ok((table, best_path))
}
