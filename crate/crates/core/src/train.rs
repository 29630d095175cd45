//! Head training over frozen-backbone features.
//!
//! Each epoch extracts (optionally augmented) training features, runs one
//! Adam step per batch, evaluates the validation split without augmentation,
//! and lets the plateau scheduler adjust the learning rate. Every random
//! stream is derived from `TrainConfig::seed`, the epoch and the sample
//! index, so a run resumed from a checkpoint continues bit-identically.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::container::{ArrayData, Container, ContainerError, NamedArray};
use crate::dataset::{GradeLabel, ImageRecord, NUM_CLASSES};
use crate::model::{
    argmax, categorical_cross_entropy, head_backward, head_forward, one_hot, Backbone, ClassifierModel, DenseHead,
    HeadSpec, ModelError,
};
use crate::optim::{AdamConfig, AdamState, OptimError, PlateauConfig, PlateauScheduler};
use crate::preprocess::{augment, normalize, resize, AugmentationPolicy, ImageTensor, PreprocessError, ValueDomain};
use crate::seed::{derive_seed, seeded_rng};

const STREAM_ONLINE: u64 = 1;
const STREAM_OFFLINE: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
/// Images per parallel extraction chunk.
const EXTRACT_CHUNK: usize = 64;

pub const CHECKPOINT_FORMAT: &str = "retino-bench-checkpoint/1";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("loss became non-finite in epoch {epoch}")]
    NonFiniteLoss { epoch: u32, diagnostic: Option<PathBuf> },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("failed to read image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: PreprocessError,
    },
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl TrainError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        TrainError::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentMode {
    /// No augmentation.
    Off,
    /// Fresh augmentation of every training image in every epoch.
    #[default]
    Online,
    /// The corpus is expanded once before training with augmented copies.
    Offline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: u32,
    /// `None` trains on the whole split as a single batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub optimizer: AdamConfig,
    pub scheduler: PlateauConfig,
    pub augmentation: AugmentationPolicy,
    pub augment_mode: AugmentMode,
    /// Augmented copies per image in offline mode, on top of the original.
    pub offline_copies: usize,
    /// Extract features once when the training inputs do not change between
    /// epochs; has no effect with online augmentation.
    pub feature_cache: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 15,
            batch_size: None,
            seed: 0,
            optimizer: AdamConfig::default(),
            scheduler: PlateauConfig::default(),
            augmentation: AugmentationPolicy::default(),
            augment_mode: AugmentMode::Online,
            offline_copies: 1,
            feature_cache: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == Some(0) {
            return Err(TrainError::InvalidConfig("batch_size must be at least 1".into()));
        }
        self.optimizer.validate()?;
        self.scheduler.validate()?;
        self.augmentation.validate()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub learning_rate_after: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), TrainError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "lr"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.train_accuracy.to_string(),
                e.val_loss.to_string(),
                e.val_accuracy.to_string(),
                e.learning_rate_after.to_string(),
            ])?;
        }
        w.flush().map_err(|e| TrainError::io(Path::new("<history>"), e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, TrainError> {
        let mut r = csv::Reader::from_reader(input);
        let mut epochs = Vec::new();
        for row in r.records() {
            let row = row?;
            let num = |i: usize| -> Result<f64, TrainError> {
                row.get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| TrainError::CorruptCheckpoint(format!("bad history field {i}")))
            };
            epochs.push(EpochRecord {
                epoch: num(0)? as u32,
                train_loss: num(1)?,
                train_accuracy: num(2)?,
                val_loss: num(3)?,
                val_accuracy: num(4)?,
                learning_rate_after: num(5)?,
            });
        }
        Ok(TrainingHistory { epochs })
    }
}

/// Labeled images, already sized for the backbone.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn label(&self, index: usize) -> GradeLabel;

    fn image(&self, index: usize) -> Result<ImageTensor, TrainError>;
}

/// Images decoded from disk on demand, resized and scaled to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ManifestSource {
    records: Vec<ImageRecord>,
    image_root: PathBuf,
    input_hw: (usize, usize),
}

impl ManifestSource {
    pub fn new(records: Vec<ImageRecord>, image_root: impl Into<PathBuf>, input_hw: (usize, usize)) -> Self {
        ManifestSource { records, image_root: image_root.into(), input_hw }
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }
}

impl SampleSource for ManifestSource {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn label(&self, index: usize) -> GradeLabel {
        self.records[index].label
    }

    fn image(&self, index: usize) -> Result<ImageTensor, TrainError> {
        let path = self.image_root.join(&self.records[index].image_path);
        let wrap = |source| TrainError::Image { path: path.clone(), source };
        let raw = ImageTensor::load(&path).map_err(wrap)?;
        let sized = resize(&raw, self.input_hw.0, self.input_hw.1).map_err(wrap)?;
        normalize(&sized).map_err(wrap)
    }
}

#[derive(Debug, Clone, Default)]
pub struct InMemorySource {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<GradeLabel>,
}

impl SampleSource for InMemorySource {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn label(&self, index: usize) -> GradeLabel {
        self.labels[index]
    }

    fn image(&self, index: usize) -> Result<ImageTensor, TrainError> {
        Ok(self.images[index].clone())
    }
}

pub fn labels_of(source: &dyn SampleSource) -> Vec<GradeLabel> {
    (0..source.len()).map(|i| source.label(i)).collect()
}

/// Features for every sample, each image optionally transformed first.
/// Chunks bound memory; within a chunk images are processed in parallel and
/// results keep sample order.
fn features_with<F>(model: &ClassifierModel, source: &dyn SampleSource, transform: F) -> Result<Array2<f64>, TrainError>
where
    F: Fn(usize, ImageTensor) -> Result<ImageTensor, TrainError> + Sync,
{
    let n = source.len();
    let mut out = Array2::zeros((n, model.backbone.feature_dim()));
    for start in (0..n).step_by(EXTRACT_CHUNK) {
        let end = (start + EXTRACT_CHUNK).min(n);
        let images = (start..end)
            .into_par_iter()
            .map(|i| source.image(i).and_then(|img| transform(i, img)))
            .collect::<Result<Vec<_>, _>>()?;
        let feats = model.extract_features(&images)?;
        out.slice_mut(ndarray::s![start..end, ..]).assign(&feats);
    }
    Ok(out)
}

pub fn extract_all(model: &ClassifierModel, source: &dyn SampleSource) -> Result<Array2<f64>, TrainError> {
    features_with(model, source, |_, img| Ok(img))
}

/// Predictions and loss for a fixed feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub probabilities: Array2<f64>,
    pub predicted: Vec<GradeLabel>,
    pub loss: f64,
    pub accuracy: f64,
}

pub fn evaluate_features(
    model: &ClassifierModel,
    features: &Array2<f64>,
    labels: &[GradeLabel],
) -> Result<Evaluation, TrainError> {
    if labels.is_empty() {
        return Err(TrainError::EmptySplit("evaluation"));
    }
    let (probabilities, predicted) = model.predict_features(features)?;
    let targets = one_hot(&labels.iter().map(|l| l.index()).collect::<Vec<_>>(), NUM_CLASSES);
    let loss = categorical_cross_entropy(&probabilities, &targets)?;
    let correct = predicted.iter().zip(labels).filter(|(p, t)| p == t).count();
    Ok(Evaluation { probabilities, predicted, loss, accuracy: correct as f64 / labels.len() as f64 })
}

/// Mean cross-entropy and argmax accuracy over a split, without mutation.
pub fn evaluate_epoch(model: &ClassifierModel, split: &dyn SampleSource) -> Result<(f64, f64), TrainError> {
    if split.is_empty() {
        return Err(TrainError::EmptySplit("evaluation"));
    }
    let features = extract_all(model, split)?;
    let e = evaluate_features(model, &features, &labels_of(split))?;
    Ok((e.loss, e.accuracy))
}

/// Everything needed to continue a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: ClassifierModel,
    pub adam: AdamState,
    pub scheduler: PlateauScheduler,
    pub history: TrainingHistory,
}

impl TrainState {
    pub fn fresh(model: ClassifierModel, config: &TrainConfig) -> Self {
        let sizes: Vec<usize> = model.head.parameters().iter().map(|p| p.len()).collect();
        TrainState {
            adam: AdamState::new(&sizes, &config.optimizer),
            scheduler: PlateauScheduler::new(config.scheduler),
            history: TrainingHistory::default(),
            model,
        }
    }

    pub fn epoch(&self) -> u32 {
        self.history.len() as u32
    }
}

/// Where to write the diagnostic checkpoint when the loss stops being finite.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub diagnostic_checkpoint: Option<PathBuf>,
}

pub fn train(
    model: ClassifierModel,
    train_split: &dyn SampleSource,
    val_split: &dyn SampleSource,
    config: &TrainConfig,
) -> Result<(ClassifierModel, TrainingHistory), TrainError> {
    let state = TrainState::fresh(model, config);
    let state = resume(state, train_split, val_split, config, config.epochs, &TrainOptions::default())?;
    Ok((state.model, state.history))
}

/// Train from the state's current epoch up to and including `until_epoch`.
pub fn resume(
    mut state: TrainState,
    train_split: &dyn SampleSource,
    val_split: &dyn SampleSource,
    config: &TrainConfig,
    until_epoch: u32,
    options: &TrainOptions,
) -> Result<TrainState, TrainError> {
    config.validate()?;
    if state.epoch() >= until_epoch {
        return Ok(state);
    }
    if train_split.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val_split.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }

    let model_ref = &state.model;
    let policy = config.augmentation;
    let (base_labels, cached): (Vec<GradeLabel>, Option<Array2<f64>>) = match config.augment_mode {
        AugmentMode::Online => (labels_of(train_split), None),
        AugmentMode::Off => {
            let labels = labels_of(train_split);
            let cache = if config.feature_cache { Some(extract_all(model_ref, train_split)?) } else { None };
            (labels, cache)
        }
        AugmentMode::Offline => {
            let expanded = OfflineExpansion { inner: train_split, copies: config.offline_copies, policy, seed: config.seed };
            let labels = labels_of(&expanded);
            let cache = if config.feature_cache { Some(extract_all(model_ref, &expanded)?) } else { None };
            (labels, cache)
        }
    };
    let val_features = extract_all(model_ref, val_split)?;
    let val_labels = labels_of(val_split);
    let targets_all = one_hot(&base_labels.iter().map(|l| l.index()).collect::<Vec<_>>(), NUM_CLASSES);

    for epoch in state.epoch() + 1..=until_epoch {
        let features = match (&cached, config.augment_mode) {
            (Some(f), _) => f.clone(),
            (None, AugmentMode::Off) => extract_all(&state.model, train_split)?,
            (None, AugmentMode::Offline) => extract_all(
                &state.model,
                &OfflineExpansion { inner: train_split, copies: config.offline_copies, policy, seed: config.seed },
            )?,
            (None, AugmentMode::Online) => features_with(&state.model, train_split, |i, img| {
                let seed = derive_seed(config.seed, &[STREAM_ONLINE, epoch as u64, i as u64]);
                Ok(augment(&img, train_split.label(i), &policy, seed)?.0)
            })?,
        };

        let (train_loss, train_accuracy) = run_epoch(&mut state, &features, &targets_all, config, epoch)
            .map_err(|e| diagnose(e, &state, config, options))?;
        let val = evaluate_features(&state.model, &val_features, &val_labels)?;
        if !val.loss.is_finite() {
            return Err(diagnose(TrainError::NonFiniteLoss { epoch, diagnostic: None }, &state, config, options));
        }
        let lr = state.scheduler.update(val.accuracy, state.adam.alpha);
        state.adam.alpha = lr;
        log::info!(
            "epoch {epoch}: train_loss={train_loss:.4} train_acc={train_accuracy:.4} val_loss={:.4} val_acc={:.4} lr={lr}",
            val.loss,
            val.accuracy
        );
        state.history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            train_accuracy,
            val_loss: val.loss,
            val_accuracy: val.accuracy,
            learning_rate_after: lr,
        });
    }
    Ok(state)
}

/// One pass of Adam steps; returns the sample-weighted loss and accuracy of
/// the forward passes that produced the gradients.
fn run_epoch(
    state: &mut TrainState,
    features: &Array2<f64>,
    targets: &Array2<f64>,
    config: &TrainConfig,
    epoch: u32,
) -> Result<(f64, f64), TrainError> {
    let n = features.nrows();
    let batches: Vec<Vec<usize>> = match config.batch_size {
        None => vec![(0..n).collect()],
        Some(size) => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut seeded_rng(derive_seed(config.seed, &[STREAM_SHUFFLE, epoch as u64])));
            order.chunks(size).map(<[usize]>::to_vec).collect()
        }
    };
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    for batch in batches {
        let (x, y) = if batch.len() == n && config.batch_size.is_none() {
            (features.clone(), targets.clone())
        } else {
            (features.select(Axis(0), &batch), targets.select(Axis(0), &batch))
        };
        let head = &mut state.model.head;
        let (probs, cache) = head_forward(head, &x)?;
        let loss = categorical_cross_entropy(&probs, &y)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch, diagnostic: None });
        }
        loss_sum += loss * batch.len() as f64;
        correct += probs.rows().into_iter().zip(y.rows()).filter(|(p, t)| argmax(*p) == argmax(*t)).count();
        let grads = head_backward(head, &cache, &y)?;
        let grad_slices = grads.slices();
        let mut params = head.parameters_mut();
        state.adam.step(&mut params, &grad_slices).map_err(|e| match e {
            OptimError::NonFiniteGradient { .. } => TrainError::NonFiniteLoss { epoch, diagnostic: None },
            other => other.into(),
        })?;
    }
    Ok((loss_sum / n as f64, correct as f64 / n as f64))
}

fn diagnose(err: TrainError, state: &TrainState, config: &TrainConfig, options: &TrainOptions) -> TrainError {
    match err {
        TrainError::NonFiniteLoss { epoch, .. } => {
            let diagnostic = options.diagnostic_checkpoint.as_ref().and_then(|path| {
                match save_checkpoint(path, state, config) {
                    Ok(()) => Some(path.clone()),
                    Err(e) => {
                        log::error!("could not write diagnostic checkpoint: {e}");
                        None
                    }
                }
            });
            TrainError::NonFiniteLoss { epoch, diagnostic }
        }
        other => other,
    }
}

/// Originals followed by `copies` augmented versions of each.
struct OfflineExpansion<'a> {
    inner: &'a dyn SampleSource,
    copies: usize,
    policy: AugmentationPolicy,
    seed: u64,
}

impl SampleSource for OfflineExpansion<'_> {
    fn len(&self) -> usize {
        self.inner.len() * (self.copies + 1)
    }

    fn label(&self, index: usize) -> GradeLabel {
        self.inner.label(index % self.inner.len())
    }

    fn image(&self, index: usize) -> Result<ImageTensor, TrainError> {
        let n = self.inner.len();
        let (copy, i) = (index / n, index % n);
        let img = self.inner.image(i)?;
        if copy == 0 {
            return Ok(img);
        }
        let seed = derive_seed(self.seed, &[STREAM_OFFLINE, copy as u64, i as u64]);
        Ok(augment(&img, self.inner.label(i), &self.policy, seed)?.0)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    format: String,
    epoch: u32,
    config_hash: String,
    backbone: String,
    feature_dim: usize,
    head: HeadSpec,
    adam_step: u64,
    adam_alpha: f64,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_epsilon: f64,
    scheduler: PlateauScheduler,
    history: TrainingHistory,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Head weights and Adam moments go into the named-array container at
/// `path`; scalars, scheduler state and history into a JSON sidecar next
/// to it.
pub fn save_checkpoint(path: &Path, state: &TrainState, config: &TrainConfig) -> Result<(), TrainError> {
    let head = &state.model.head;
    let mut c = Container::new()
        .with_meta("format", CHECKPOINT_FORMAT)
        .with_meta("backbone", state.model.backbone.id().name());
    let names = DenseHead::parameter_names();
    let shapes = head.parameter_shapes();
    for (i, p) in head.parameters().iter().enumerate() {
        c.push(names[i].clone(), NamedArray::f64(shapes[i].clone(), p.to_vec()));
    }
    for (i, name) in names.iter().enumerate() {
        c.push(format!("adam/m/{name}"), NamedArray::f64(shapes[i].clone(), state.adam.m[i].clone()));
        c.push(format!("adam/v/{name}"), NamedArray::f64(shapes[i].clone(), state.adam.v[i].clone()));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| TrainError::io(parent, e))?;
    }
    c.write(path)?;
    let sidecar = Sidecar {
        format: CHECKPOINT_FORMAT.into(),
        epoch: state.epoch(),
        config_hash: config.hash(),
        backbone: state.model.backbone.id().name().into(),
        feature_dim: head.input_dim(),
        head: head.spec().clone(),
        adam_step: state.adam.step,
        adam_alpha: state.adam.alpha,
        adam_beta1: state.adam.beta1,
        adam_beta2: state.adam.beta2,
        adam_epsilon: state.adam.epsilon,
        scheduler: state.scheduler,
        history: state.history.clone(),
    };
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| TrainError::io(&side, e))?;
    Ok(())
}

/// Restores a checkpoint onto `backbone`, which must be the one it was
/// trained with. Returns the state and the stored config hash.
pub fn load_checkpoint(path: &Path, backbone: Arc<Backbone>) -> Result<(TrainState, String), TrainError> {
    let side = sidecar_path(path);
    let text = fs::read(&side).map_err(|e| TrainError::io(&side, e))?;
    let sidecar: Sidecar =
        serde_json::from_slice(&text).map_err(|e| TrainError::CorruptCheckpoint(format!("{}: {e}", side.display())))?;
    if sidecar.format != CHECKPOINT_FORMAT {
        return Err(TrainError::CorruptCheckpoint(format!("unknown format `{}`", sidecar.format)));
    }
    let c = Container::read(path).map_err(|e| match e {
        ContainerError::Corrupt { path, message } => TrainError::CorruptCheckpoint(format!("{}: {message}", path.display())),
        other => other.into(),
    })?;
    let stored = c.metadata.get("backbone").cloned().unwrap_or_default();
    if stored != backbone.id().name() || sidecar.backbone != stored {
        return Err(ModelError::BackboneMismatch { expected: backbone.id().name().into(), found: stored }.into());
    }
    if sidecar.feature_dim != backbone.feature_dim() {
        return Err(ModelError::ShapeMismatch {
            layer: "dense_1".into(),
            detail: format!("checkpoint expects {} features, backbone gives {}", sidecar.feature_dim, backbone.feature_dim()),
        }
        .into());
    }
    let f64_array = |name: &str| -> Result<(Vec<usize>, Vec<f64>), TrainError> {
        match c.get(name) {
            Some(NamedArray { shape, data: ArrayData::F64(v) }) => Ok((shape.clone(), v.clone())),
            _ => Err(TrainError::CorruptCheckpoint(format!("missing float64 tensor `{name}`"))),
        }
    };
    let names = DenseHead::parameter_names();
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    let (mut m, mut v) = (Vec::new(), Vec::new());
    for (i, name) in names.iter().enumerate() {
        let (shape, data) = f64_array(name)?;
        let bad = |e: ndarray::ShapeError| TrainError::CorruptCheckpoint(format!("{name}: {e}"));
        if i % 2 == 0 {
            if shape.len() != 2 {
                return Err(TrainError::CorruptCheckpoint(format!("{name} must be 2-D")));
            }
            weights.push(Array2::from_shape_vec((shape[0], shape[1]), data).map_err(bad)?);
        } else {
            biases.push(Array1::from(data));
        }
        m.push(f64_array(&format!("adam/m/{name}"))?.1);
        v.push(f64_array(&format!("adam/v/{name}"))?.1);
    }
    let head = DenseHead::from_parts(sidecar.feature_dim, &sidecar.head, weights, biases)?;
    if m.iter().zip(head.parameters()).any(|(mi, p)| mi.len() != p.len()) || m.len() != v.len() {
        return Err(TrainError::CorruptCheckpoint("optimizer moments do not match parameters".into()));
    }
    if sidecar.history.len() as u32 != sidecar.epoch {
        return Err(TrainError::CorruptCheckpoint("history length disagrees with epoch".into()));
    }
    let adam = AdamState {
        step: sidecar.adam_step,
        m,
        v,
        alpha: sidecar.adam_alpha,
        beta1: sidecar.adam_beta1,
        beta2: sidecar.adam_beta2,
        epsilon: sidecar.adam_epsilon,
    };
    let model = ClassifierModel { backbone, head, num_classes: NUM_CLASSES };
    Ok((TrainState { model, adam, scheduler: sidecar.scheduler, history: sidecar.history }, sidecar.config_hash))
}

/// A small separable set for the identity stub: one `1×2` image per sample,
/// whose six values encode the class as a scaled one-hot direction plus
/// seeded jitter.
pub fn separable_stub_set(per_class: usize, seed: u64) -> InMemorySource {
    use rand::Rng;
    let mut rng = seeded_rng(seed);
    let mut src = InMemorySource::default();
    for i in 0..per_class * NUM_CLASSES {
        let label = GradeLabel::ALL[i % NUM_CLASSES];
        let mut values: Vec<f32> = (0..6).map(|_| rng.gen_range(0.0..0.15)).collect();
        values[label.index()] += 0.8;
        let data = ndarray::Array3::from_shape_vec((1, 2, 3), values).expect("six values");
        src.images.push(ImageTensor::new(data, ValueDomain::Unit0To1).expect("valid image"));
        src.labels.push(label);
    }
    src
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::backbone::stub::StubConfig;
    use crate::model::{build_model, BackboneId, IngressMode, WeightSource};

    fn stub_model(seed: u64) -> ClassifierModel {
        build_model(
            BackboneId::Stub,
            &HeadSpec::default(),
            WeightSource::Stub(StubConfig::identity(1, 2)),
            IngressMode::Native,
            seed,
        )
        .unwrap()
    }

    fn quiet_config(epochs: u32) -> TrainConfig {
        TrainConfig { epochs, augment_mode: AugmentMode::Off, ..TrainConfig::default() }
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let model = stub_model(1);
        let before = model.head.clone();
        let empty = InMemorySource::default();
        let (after, history) = train(model, &empty, &empty, &quiet_config(0)).unwrap();
        assert!(history.is_empty());
        assert_eq!(after.head, before);
    }

    #[test]
    fn empty_split_is_rejected() {
        let data = separable_stub_set(2, 0);
        let err = train(stub_model(1), &InMemorySource::default(), &data, &quiet_config(1)).unwrap_err();
        assert!(matches!(err, TrainError::EmptySplit("train")));
    }

    #[test]
    fn history_has_one_row_per_epoch_and_backbone_is_untouched() {
        let data = separable_stub_set(4, 3);
        let model = stub_model(2);
        let fp = model.backbone.weights_fingerprint();
        let cfg = TrainConfig { epochs: 15, ..TrainConfig::default() };
        let (trained, history) = train(model, &data, &data, &cfg).unwrap();
        assert_eq!(history.len(), 15);
        assert_eq!(history.epochs.iter().map(|e| e.epoch).collect::<Vec<_>>(), (1..=15).collect::<Vec<_>>());
        assert_eq!(trained.backbone.weights_fingerprint(), fp);
        for e in &history.epochs {
            assert!((0.0..=1.0).contains(&e.train_accuracy) && (0.0..=1.0).contains(&e.val_accuracy));
            assert!(e.train_loss >= 0.0 && e.val_loss >= 0.0);
        }
    }

    #[test]
    fn full_batch_takes_one_step_per_epoch() {
        let data = separable_stub_set(2, 3);
        let cfg = quiet_config(4);
        let state = resume(TrainState::fresh(stub_model(0), &cfg), &data, &data, &cfg, 4, &TrainOptions::default()).unwrap();
        assert_eq!(state.adam.step, 4);
        let cfg = TrainConfig { batch_size: Some(3), ..quiet_config(2) };
        let state = resume(TrainState::fresh(stub_model(0), &cfg), &data, &data, &cfg, 2, &TrainOptions::default()).unwrap();
        assert_eq!(state.adam.step, 2 * 4);
    }

    #[test]
    fn deterministic_across_modes() {
        let data = separable_stub_set(3, 5);
        for mode in [AugmentMode::Off, AugmentMode::Online, AugmentMode::Offline] {
            let cfg = TrainConfig { epochs: 3, augment_mode: mode, batch_size: Some(4), seed: 11, ..TrainConfig::default() };
            let a = train(stub_model(4), &data, &data, &cfg).unwrap();
            let b = train(stub_model(4), &data, &data, &cfg).unwrap();
            assert_eq!(a.1, b.1);
            assert_eq!(a.0.head, b.0.head);
        }
    }

    #[test]
    fn cache_does_not_change_results() {
        let data = separable_stub_set(3, 5);
        let on = TrainConfig { epochs: 3, augment_mode: AugmentMode::Offline, ..TrainConfig::default() };
        let off = TrainConfig { feature_cache: false, ..on.clone() };
        assert_eq!(train(stub_model(4), &data, &data, &on).unwrap().1, train(stub_model(4), &data, &data, &off).unwrap().1);
    }

    #[test]
    fn evaluate_epoch_uniform_model() {
        let data = separable_stub_set(2, 1);
        let mut model = stub_model(0);
        for p in model.head.parameters_mut() {
            p.iter_mut().for_each(|v| *v = 0.0);
        }
        let (loss, acc) = evaluate_epoch(&model, &data).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
        assert_eq!(acc, 0.2);
    }

    #[test]
    fn checkpoint_round_trip_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let data = separable_stub_set(3, 8);
        let cfg = TrainConfig { epochs: 6, batch_size: Some(5), seed: 2, ..TrainConfig::default() };
        let opts = TrainOptions::default();

        let full = resume(TrainState::fresh(stub_model(9), &cfg), &data, &data, &cfg, 6, &opts).unwrap();

        let half = resume(TrainState::fresh(stub_model(9), &cfg), &data, &data, &cfg, 3, &opts).unwrap();
        let path = dir.path().join("ckpt.safetensors");
        save_checkpoint(&path, &half, &cfg).unwrap();
        let (loaded, hash) = load_checkpoint(&path, half.model.backbone.clone()).unwrap();
        assert_eq!(hash, cfg.hash());
        assert_eq!(loaded.model.head, half.model.head);
        assert_eq!(loaded.adam, half.adam);
        assert_eq!(loaded.history, half.history);
        let resumed = resume(loaded, &data, &data, &cfg, 6, &opts).unwrap();
        assert_eq!(resumed.model.head, full.model.head);
        assert_eq!(resumed.history, full.history);

        let other = Arc::new(
            Backbone::load(BackboneId::Stub, WeightSource::Stub(StubConfig::identity(1, 2)), IngressMode::Native).unwrap(),
        );
        assert!(load_checkpoint(&path, other).is_ok());
        let wrong = Arc::new(Backbone::detached(crate::model::BackboneSpec {
            id: BackboneId::Vgg16,
            input_shape: (224, 224, 3),
            feature_dim: 6,
            frozen: true,
            weight_source: WeightSource::RandomSeeded { seed: 0 },
            ingress: IngressMode::Native,
        }));
        assert!(matches!(load_checkpoint(&path, wrong), Err(TrainError::Model(ModelError::BackboneMismatch { .. }))));

        fs::write(&path, b"garbage").unwrap();
        assert!(load_checkpoint(&path, half.model.backbone.clone()).is_err());
    }

    #[test]
    fn non_finite_loss_writes_diagnostic() {
        let dir = tempfile::tempdir().unwrap();
        let mut data = separable_stub_set(2, 1);
        data.images[0] = ImageTensor::filled(1, 2, f32::NAN, ValueDomain::Unit0To1);
        let cfg = quiet_config(2);
        let opts = TrainOptions { diagnostic_checkpoint: Some(dir.path().join("diag.safetensors")) };
        let err = resume(TrainState::fresh(stub_model(0), &cfg), &data, &data, &cfg, 2, &opts).unwrap_err();
        match err {
            TrainError::NonFiniteLoss { epoch: 1, diagnostic: Some(p) } => assert!(p.exists()),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn history_csv_round_trip() {
        let data = separable_stub_set(2, 1);
        let (_, h) = train(stub_model(0), &data, &data, &quiet_config(3)).unwrap();
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("epoch,train_loss,train_acc,val_loss,val_acc,lr\n"));
        assert_eq!(TrainingHistory::read_csv(&buf[..]).unwrap(), h);
    }
}
