//! The `split`, `train`, `evaluate` and `compare` commands, plus the mapping
//! from module errors to process exit codes.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::config::{ConfigError, RunConfigFile};
use crate::dataset::{
    class_distribution, load_manifest, stratified_split, DatasetError, DatasetManifest, GradeLabel, Split,
    SplitSelector,
};
use crate::eval::{confusion_matrix, metrics_table, roc_curve, ConfusionMatrix, EvalError, MetricsTable};
use crate::model::head::HEAD_INIT;
use crate::model::{Backbone, ClassifierModel, ModelError};
use crate::optim::OptimError;
use crate::report::{
    allocate_run_dir, compare_runs, emit_report, make_run_id, write_comparison, write_metrics_bundle, Comparison,
    DatasetSummary, ExperimentRecord, ReportError, RocEntry, RunConfigRecord, RECORD_FILE,
};
use crate::train::{
    evaluate_features, extract_all, labels_of, load_checkpoint, resume, save_checkpoint, Evaluation, ManifestSource,
    SampleSource, TrainError, TrainOptions, TrainState,
};

/// Overrides the configured output root.
pub const RUNS_DIR_ENV: &str = "RETINO_BENCH_RUNS_DIR";
pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.safetensors";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Usage(_) => 1,
            PipelineError::Data(_) => 2,
            PipelineError::Numeric(_) => 3,
        }
    }
}

impl From<ConfigError> for PipelineError {
    fn from(e: ConfigError) -> Self {
        PipelineError::Usage(e.to_string())
    }
}

impl From<DatasetError> for PipelineError {
    fn from(e: DatasetError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<ModelError> for PipelineError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::UnknownBackbone(_) | ModelError::InvalidHead(_) | ModelError::UnsupportedWeightSource { .. } => {
                PipelineError::Usage(e.to_string())
            }
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for PipelineError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { epoch, diagnostic } => PipelineError::Numeric(match diagnostic {
                Some(p) => format!("loss became non-finite in epoch {epoch}; diagnostic checkpoint at {}", p.display()),
                None => format!("loss became non-finite in epoch {epoch}"),
            }),
            TrainError::Optim(OptimError::NonFiniteGradient { .. }) => PipelineError::Numeric(e.to_string()),
            TrainError::InvalidConfig(_) | TrainError::Optim(OptimError::InvalidHyperparameter(_)) => {
                PipelineError::Usage(e.to_string())
            }
            TrainError::Model(m) => m.into(),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for PipelineError {
    fn from(e: EvalError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<ReportError> for PipelineError {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::Train(t) => t.into(),
            other => PipelineError::Data(other.to_string()),
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// Replaces the dataset split, head initialization and training seeds.
    pub seed: Option<u64>,
    pub epochs: Option<u32>,
    pub backbone: Option<String>,
}

pub fn apply_overrides(cfg: &mut RunConfigFile, o: &Overrides) -> Result<(), PipelineError> {
    if let Some(seed) = o.seed {
        cfg.dataset.seed = seed;
        cfg.model.init_seed = seed;
        cfg.training.seed = seed;
    }
    if let Some(epochs) = o.epochs {
        cfg.training.epochs = epochs;
    }
    if let Some(b) = &o.backbone {
        cfg.model.backbone = b.clone();
    }
    cfg.validate()?;
    Ok(())
}

/// The output root: the environment override if set, else the config value.
pub fn runs_root(cfg: &RunConfigFile) -> PathBuf {
    match std::env::var_os(RUNS_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => cfg.output.runs_dir.clone(),
    }
}

/// Loads the manifest and assigns splits. A manifest whose records all carry
/// a split keeps it; otherwise the stratified split is computed.
pub fn prepare_split(cfg: &RunConfigFile) -> Result<DatasetManifest, PipelineError> {
    let manifest = load_manifest(&cfg.dataset.manifest, cfg.dataset.format)?;
    if manifest.is_empty() {
        return Err(DatasetError::EmptyManifest.into());
    }
    if manifest.records.iter().all(|r| r.split != Split::Unassigned) {
        return Ok(manifest);
    }
    Ok(stratified_split(&manifest, cfg.dataset.split_fraction, cfg.dataset.seed)?)
}

fn check_images(manifest: &DatasetManifest, root: &Path) -> Result<(), PipelineError> {
    let missing: Vec<String> = manifest
        .records
        .iter()
        .map(|r| root.join(&r.image_path))
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    match missing.first() {
        None => Ok(()),
        Some(first) => Err(PipelineError::Data(format!("{} image file(s) missing, first: {first}", missing.len()))),
    }
}

fn counts(manifest: &DatasetManifest, split: Split) -> std::collections::BTreeMap<String, usize> {
    class_distribution(manifest, SplitSelector::Only(split)).into_iter().map(|(k, v)| (k.name().to_string(), v)).collect()
}

/// Writes the split manifest; returns its path.
pub fn cmd_split(cfg: &RunConfigFile, out: Option<&Path>) -> Result<(PathBuf, DatasetManifest), PipelineError> {
    let manifest = prepare_split(cfg)?;
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => runs_root(cfg).join("split.csv"),
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| PipelineError::Data(format!("{}: {e}", parent.display())))?;
    }
    manifest.write_split_csv(&path)?;
    Ok((path, manifest))
}

/// Everything computed on the evaluation split.
pub struct EvaluationBundle {
    pub evaluation: Evaluation,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricsTable,
    pub roc: Vec<RocEntry>,
}

pub fn evaluate_model(model: &ClassifierModel, split: &dyn SampleSource) -> Result<EvaluationBundle, PipelineError> {
    let features = extract_all(model, split)?;
    let labels = labels_of(split);
    let evaluation = evaluate_features(model, &features, &labels)?;
    let confusion = confusion_matrix(&labels, &evaluation.predicted)?;
    let metrics = metrics_table(&confusion)?;
    let roc = GradeLabel::ALL
        .iter()
        .map(|l| match roc_curve(&evaluation.probabilities, &labels, l.index()) {
            Ok(curve) => RocEntry { class_name: l.name().into(), curve: Some(curve), undefined_reason: None },
            Err(e) => RocEntry { class_name: l.name().into(), curve: None, undefined_reason: Some(e.to_string()) },
        })
        .collect();
    Ok(EvaluationBundle { evaluation, confusion, metrics, roc })
}

fn sources(
    cfg: &RunConfigFile,
    manifest: &DatasetManifest,
    backbone: &Backbone,
) -> (ManifestSource, ManifestSource) {
    let (h, w, _) = backbone.spec().input_shape;
    let root = cfg.image_root();
    let pick = |s| manifest.subset(SplitSelector::Only(s)).records;
    (ManifestSource::new(pick(Split::Train), &root, (h, w)), ManifestSource::new(pick(Split::Validation), &root, (h, w)))
}

pub struct TrainOutcome {
    pub run_id: String,
    pub run_dir: PathBuf,
    pub record: ExperimentRecord,
}

/// Split, train, evaluate on the validation split and emit the run bundle.
/// No run directory is created unless the data and weights load.
pub fn cmd_train(cfg: &RunConfigFile) -> Result<TrainOutcome, PipelineError> {
    let started = chrono::Utc::now();
    let manifest = prepare_split(cfg)?;
    check_images(&manifest, &cfg.image_root())?;
    let backbone = Arc::new(Backbone::load(cfg.backbone_id()?, cfg.weight_source()?, cfg.model.ingress)?);
    let head = cfg.head_spec();
    let model = ClassifierModel::new(backbone.clone(), &head, cfg.model.init_seed)?;
    let (train_src, val_src) = sources(cfg, &manifest, &backbone);
    let train_cfg = cfg.train_config();

    let config_record = RunConfigRecord {
        train: train_cfg.clone(),
        backbone: backbone.spec().clone(),
        head,
        head_init: HEAD_INIT.into(),
        head_init_seed: cfg.model.init_seed,
        split_fraction: cfg.dataset.split_fraction,
        split_seed: cfg.dataset.seed,
    };
    let fingerprint = manifest.fingerprint();
    let (run_id, run_dir) = allocate_run_dir(&runs_root(cfg), &make_run_id(&config_record, &fingerprint, started))?;
    log::info!("run {run_id}: {} train / {} validation images", train_src.len(), val_src.len());

    let options = TrainOptions { diagnostic_checkpoint: Some(run_dir.join(DIAGNOSTIC_FILE)) };
    let state = resume(TrainState::fresh(model, &train_cfg), &train_src, &val_src, &train_cfg, train_cfg.epochs, &options)?;
    let mut artifact_paths = std::collections::BTreeMap::new();
    if cfg.output.save_checkpoint {
        let path = run_dir.join(CHECKPOINT_FILE);
        save_checkpoint(&path, &state, &train_cfg)?;
        artifact_paths.insert("checkpoint".to_string(), CHECKPOINT_FILE.to_string());
        artifact_paths.insert("checkpoint_sidecar".to_string(), "checkpoint.json".to_string());
    }

    let bundle = evaluate_model(&state.model, &val_src)?;
    let mut record = ExperimentRecord {
        run_id: run_id.clone(),
        model_name: backbone.id().name().into(),
        config: config_record,
        dataset: DatasetSummary {
            source_id: manifest.source_id.clone(),
            fingerprint,
            train_counts: counts(&manifest, Split::Train),
            validation_counts: counts(&manifest, Split::Validation),
        },
        backbone_fingerprint: backbone.weights_fingerprint(),
        history: state.history,
        confusion: bundle.confusion,
        metrics: bundle.metrics,
        roc: bundle.roc,
        artifact_paths,
        started_at: started.to_rfc3339(),
        finished_at: chrono::Utc::now().to_rfc3339(),
    };
    emit_report(&mut record, &run_dir)?;
    Ok(TrainOutcome { run_id, run_dir, record })
}

/// Re-evaluates a saved checkpoint on the configured validation split and
/// writes a metrics bundle to `out` (default: `eval/` beside the checkpoint).
pub fn cmd_evaluate(
    cfg: &RunConfigFile,
    checkpoint: &Path,
    out: Option<&Path>,
) -> Result<(PathBuf, EvaluationBundle), PipelineError> {
    if !checkpoint.is_file() {
        return Err(PipelineError::Data(format!("checkpoint not found: {}", checkpoint.display())));
    }
    let manifest = prepare_split(cfg)?;
    check_images(&manifest, &cfg.image_root())?;
    let backbone = Arc::new(Backbone::load(cfg.backbone_id()?, cfg.weight_source()?, cfg.model.ingress)?);
    let (state, hash) = load_checkpoint(checkpoint, backbone.clone())?;
    if hash != cfg.train_config().hash() {
        log::warn!("checkpoint was trained with a different training config");
    }
    let (_, val_src) = sources(cfg, &manifest, &backbone);
    let bundle = evaluate_model(&state.model, &val_src)?;
    let out_dir = match out {
        Some(p) => p.to_path_buf(),
        None => checkpoint.parent().unwrap_or(Path::new(".")).join("eval"),
    };
    write_metrics_bundle(backbone.id().name(), &bundle.confusion, &bundle.metrics, &bundle.roc, &out_dir)?;
    Ok((out_dir, bundle))
}

/// Merges the named runs into one Table-1-shaped CSV plus a best-model
/// summary, written to `out` (default: `<runs root>/comparison`).
pub fn cmd_compare(runs_root: &Path, run_ids: &[String], out: Option<&Path>) -> Result<(PathBuf, Comparison), PipelineError> {
    if run_ids.is_empty() {
        return Err(PipelineError::Usage("compare needs at least one run id".into()));
    }
    let records = run_ids
        .iter()
        .map(|id| {
            let path = runs_root.join(id).join(RECORD_FILE);
            if !path.is_file() {
                return Err(PipelineError::Data(format!("no record for run `{id}` at {}", path.display())));
            }
            Ok(ExperimentRecord::load(&path)?)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let cmp = compare_runs(&records)?;
    if cmp.mixed_datasets {
        log::warn!("compared runs were evaluated on different datasets");
    }
    let out_dir = out.map(Path::to_path_buf).unwrap_or_else(|| runs_root.join("comparison"));
    write_comparison(&cmp, &out_dir)?;
    Ok((out_dir, cmp))
}
