//! The TOML run configuration.
//!
//! Every key has a default and unknown keys are rejected. Relative paths are
//! resolved against the directory holding the config file.
//!
//! ```toml
//! [dataset]
//! manifest = "data/manifest.csv"   # CSV or, with format = "directory-tree", a folder
//! format = "csv"
//! image_root = ""                  # defaults to the manifest's directory
//! split_fraction = 0.8
//! seed = 0
//!
//! [preprocessing]
//! augmentation = "online"          # "off" | "online" | "offline"
//! offline_copies = 1
//! rotation_max_deg = 15.0
//! shear_max = 0.1
//! crop_fraction = 0.9
//! hflip_probability = 0.5
//!
//! [model]
//! backbone = "VGG16"               # VGG16 | ResNet50V2 | EfficientNetB0 | StubBackbone
//! weights = "seeded"               # "checkpoint" | "seeded" (stub ignores this)
//! weights_path = ""
//! weights_seed = 0
//! ingress = "native"               # "native" | "passthrough"
//! head_widths = [256, 128, 128, 5]
//! init_seed = 0
//! stub_mode = "projection"         # "projection" | "identity"
//! stub_input = [32, 32]
//! stub_feature_dim = 64
//! stub_seed = 0
//!
//! [optimizer]
//! learning_rate = 0.001
//! beta1 = 0.9
//! beta2 = 0.999
//! epsilon = 1e-8
//!
//! [scheduler]
//! factor = 0.5
//! patience = 2
//! min_delta = 1e-4
//! min_lr = 1e-6
//!
//! [training]
//! epochs = 15
//! batch_size = 0                   # 0 = the whole split in one batch
//! seed = 0
//! feature_cache = true
//!
//! [output]
//! runs_dir = "runs"
//! save_checkpoint = true
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ManifestFormat;
use crate::model::backbone::stub::{StubConfig, StubMode};
use crate::model::{BackboneId, HeadSpec, IngressMode, ModelError, WeightSource};
use crate::optim::{AdamConfig, PlateauConfig};
use crate::preprocess::AugmentationPolicy;
use crate::train::{AugmentMode, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config value: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub manifest: PathBuf,
    pub format: ManifestFormat,
    pub image_root: Option<PathBuf>,
    pub split_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            manifest: PathBuf::from("manifest.csv"),
            format: ManifestFormat::Csv,
            image_root: None,
            split_fraction: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessingSection {
    pub augmentation: AugmentMode,
    pub offline_copies: usize,
    pub rotation_max_deg: f64,
    pub shear_max: f64,
    pub crop_fraction: f64,
    pub hflip_probability: f64,
}

impl Default for PreprocessingSection {
    fn default() -> Self {
        let p = AugmentationPolicy::default();
        PreprocessingSection {
            augmentation: AugmentMode::Online,
            offline_copies: 1,
            rotation_max_deg: p.rotation_max_deg,
            shear_max: p.shear_max,
            crop_fraction: p.crop_fraction,
            hflip_probability: p.hflip_probability,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightsKind {
    Checkpoint,
    Seeded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub backbone: String,
    pub weights: WeightsKind,
    pub weights_path: Option<PathBuf>,
    pub weights_seed: u64,
    pub ingress: IngressMode,
    pub head_widths: Vec<usize>,
    pub init_seed: u64,
    pub stub_mode: StubMode,
    pub stub_input: (usize, usize),
    pub stub_feature_dim: usize,
    pub stub_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let stub = StubConfig::default();
        ModelSection {
            backbone: BackboneId::Vgg16.name().into(),
            weights: WeightsKind::Seeded,
            weights_path: None,
            weights_seed: 0,
            ingress: IngressMode::Native,
            head_widths: HeadSpec::default().layer_widths,
            init_seed: 0,
            stub_mode: stub.mode,
            stub_input: stub.input_hw,
            stub_feature_dim: stub.feature_dim,
            stub_seed: stub.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub epochs: u32,
    /// 0 selects full-batch training.
    pub batch_size: usize,
    pub seed: u64,
    pub feature_cache: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection { epochs: 15, batch_size: 0, seed: 0, feature_cache: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub runs_dir: PathBuf,
    pub save_checkpoint: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { runs_dir: PathBuf::from("runs"), save_checkpoint: true }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub dataset: DatasetSection,
    pub preprocessing: PreprocessingSection,
    pub model: ModelSection,
    pub optimizer: AdamConfig,
    pub scheduler: PlateauConfig,
    pub training: TrainingSection,
    pub output: OutputSection,
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfigFile = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset.manifest);
        if let Some(p) = self.dataset.image_root.as_mut() {
            fix(p);
        }
        if let Some(p) = self.model.weights_path.as_mut() {
            fix(p);
        }
        fix(&mut self.output.runs_dir);
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let f = self.dataset.split_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(ConfigError::Invalid(format!("dataset.split_fraction {f} must lie in (0, 1)")));
        }
        self.backbone_id()?;
        self.head_spec().validate()?;
        self.train_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.model.stub_input.0 == 0 || self.model.stub_input.1 == 0 || self.model.stub_feature_dim == 0 {
            return Err(ConfigError::Invalid("stub dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn backbone_id(&self) -> Result<BackboneId, ConfigError> {
        Ok(self.model.backbone.parse()?)
    }

    pub fn head_spec(&self) -> HeadSpec {
        HeadSpec { layer_widths: self.model.head_widths.clone() }
    }

    pub fn weight_source(&self) -> Result<WeightSource, ConfigError> {
        let m = &self.model;
        if self.backbone_id()? == BackboneId::Stub {
            return Ok(WeightSource::Stub(StubConfig {
                mode: m.stub_mode,
                input_hw: m.stub_input,
                feature_dim: m.stub_feature_dim,
                seed: m.stub_seed,
            }));
        }
        match m.weights {
            WeightsKind::Seeded => Ok(WeightSource::RandomSeeded { seed: m.weights_seed }),
            WeightsKind::Checkpoint => match &m.weights_path {
                Some(path) => Ok(WeightSource::Checkpoint { path: path.clone() }),
                None => Err(ConfigError::Invalid("model.weights = \"checkpoint\" needs model.weights_path".into())),
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let p = &self.preprocessing;
        TrainConfig {
            epochs: self.training.epochs,
            batch_size: (self.training.batch_size > 0).then_some(self.training.batch_size),
            seed: self.training.seed,
            optimizer: self.optimizer,
            scheduler: self.scheduler,
            augmentation: AugmentationPolicy {
                rotation_max_deg: p.rotation_max_deg,
                shear_max: p.shear_max,
                crop_fraction: p.crop_fraction,
                hflip_probability: p.hflip_probability,
            },
            augment_mode: p.augmentation,
            offline_copies: p.offline_copies,
            feature_cache: self.training.feature_cache,
        }
    }

    pub fn image_root(&self) -> PathBuf {
        match (&self.dataset.image_root, self.dataset.format) {
            (Some(root), _) => root.clone(),
            (None, ManifestFormat::DirectoryTree) => self.dataset.manifest.clone(),
            (None, ManifestFormat::Csv) => self.dataset.manifest.parent().map(Path::to_path_buf).unwrap_or_default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfigFile::parse("").unwrap();
        assert_eq!(cfg, RunConfigFile::default());
        assert_eq!(cfg.training.epochs, 15);
        assert_eq!(cfg.model.head_widths, vec![256, 128, 128, 5]);
        assert_eq!(cfg.train_config().batch_size, None);
        assert_eq!(cfg.train_config(), TrainConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfigFile::parse("[training]\nepochz = 3\n"), Err(ConfigError::Parse(_))));
        assert!(matches!(RunConfigFile::parse("[extra]\n"), Err(ConfigError::Parse(_))));
        assert!(matches!(RunConfigFile::parse("[optimizer]\nmomentum = 0.9\n"), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(matches!(RunConfigFile::parse("[model]\nbackbone = \"AlexNet\"\n"), Err(ConfigError::Model(_))));
        assert!(RunConfigFile::parse("[dataset]\nsplit_fraction = 1.0\n").is_err());
        assert!(RunConfigFile::parse("[model]\nhead_widths = [8, 5]\n").is_err());
        assert!(RunConfigFile::parse("[preprocessing]\ncrop_fraction = 0.0\n").is_err());
    }

    #[test]
    fn sections_map_to_components() {
        let text = r#"
            [dataset]
            manifest = "m.csv"
            [model]
            backbone = "StubBackbone"
            stub_mode = "identity"
            stub_input = [2, 3]
            [training]
            epochs = 4
            batch_size = 8
            [preprocessing]
            augmentation = "offline"
            offline_copies = 2
        "#;
        let mut cfg = RunConfigFile::parse(text).unwrap();
        cfg.resolve_paths(Path::new("/cfg"));
        assert_eq!(cfg.dataset.manifest, PathBuf::from("/cfg/m.csv"));
        assert_eq!(cfg.image_root(), PathBuf::from("/cfg"));
        let t = cfg.train_config();
        assert_eq!((t.epochs, t.batch_size, t.augment_mode, t.offline_copies), (4, Some(8), AugmentMode::Offline, 2));
        match cfg.weight_source().unwrap() {
            WeightSource::Stub(s) => assert_eq!((s.mode, s.input_hw), (StubMode::Identity, (2, 3))),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn checkpoint_weights_need_a_path() {
        let cfg = RunConfigFile::parse("[model]\nweights = \"checkpoint\"\n").unwrap();
        assert!(cfg.weight_source().is_err());
    }
}
