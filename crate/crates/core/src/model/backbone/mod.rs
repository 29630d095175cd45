//! Frozen feature extractors.
//!
//! A [`Backbone`] owns its weights immutably; nothing in the crate exposes a
//! mutable path to them. Extraction applies the backbone's ingress hook, runs
//! the convolutional base, and global-average-pools the terminal map.

pub mod efficientnet_b0;
pub mod ops;
pub mod resnet50v2;
pub mod stub;
pub mod vgg16;
pub mod weights;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use self::efficientnet_b0::EfficientNetB0;
use self::ops::{global_average_pool, FeatureMap, VisitParams};
use self::resnet50v2::ResNet50V2;
use self::stub::{StubBackbone, StubConfig};
use self::vgg16::Vgg16;
use self::weights::{LayoutRecorder, MapWeights, SeededWeights, WeightProvider};
use super::ModelError;
use crate::container::Container;
use crate::preprocess::{ImageTensor, ValueDomain};

/// Metadata key naming the architecture inside a converted checkpoint.
pub const BACKBONE_KEY: &str = "backbone";
pub const FORMAT_KEY: &str = "format";
pub const BACKBONE_FORMAT: &str = "retino-bench-backbone/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BackboneId {
    #[serde(rename = "VGG16")]
    Vgg16,
    #[serde(rename = "ResNet50V2")]
    ResNet50V2,
    #[serde(rename = "EfficientNetB0")]
    EfficientNetB0,
    #[serde(rename = "StubBackbone")]
    Stub,
}

impl BackboneId {
    pub const ALL: [BackboneId; 4] = [BackboneId::Vgg16, BackboneId::ResNet50V2, BackboneId::EfficientNetB0, BackboneId::Stub];

    pub fn name(self) -> &'static str {
        match self {
            BackboneId::Vgg16 => "VGG16",
            BackboneId::ResNet50V2 => "ResNet50V2",
            BackboneId::EfficientNetB0 => "EfficientNetB0",
            BackboneId::Stub => "StubBackbone",
        }
    }

    /// Terminal feature map `(h, w, c)` before pooling, for the 224×224 nets.
    pub fn terminal_shape(self) -> Option<(usize, usize, usize)> {
        match self {
            BackboneId::Vgg16 => Some((7, 7, vgg16::FEATURE_DIM)),
            BackboneId::ResNet50V2 => Some((7, 7, resnet50v2::FEATURE_DIM)),
            BackboneId::EfficientNetB0 => Some((7, 7, efficientnet_b0::FEATURE_DIM)),
            BackboneId::Stub => None,
        }
    }
}

impl fmt::Display for BackboneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackboneId {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.iter().copied().find(|b| b.name() == s).ok_or_else(|| ModelError::UnknownBackbone(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum WeightSource {
    /// Converted pretrained weights in the portable container format.
    Checkpoint { path: PathBuf },
    /// Deterministic synthetic weights; see [`SeededWeights`].
    RandomSeeded { seed: u64 },
    Stub(StubConfig),
}

/// How images are mapped into the value range a backbone was trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IngressMode {
    /// The convention of the published weights: Caffe-style BGR mean
    /// subtraction for VGG16, `[-1, 1]` scaling for ResNet50V2, raw pixels for
    /// EfficientNetB0 (which normalizes internally), `[0, 1]` for the stub.
    #[default]
    Native,
    /// Feed pixel values unchanged.
    Passthrough,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub id: BackboneId,
    pub input_shape: (usize, usize, usize),
    pub feature_dim: usize,
    pub frozen: bool,
    pub weight_source: WeightSource,
    pub ingress: IngressMode,
}

#[derive(Debug)]
enum Engine {
    Vgg16(Box<Vgg16>),
    ResNet50V2(Box<ResNet50V2>),
    EfficientNetB0(Box<EfficientNetB0>),
    Stub(StubBackbone),
    /// Shape and identity only; extraction is unavailable.
    Detached,
}

#[derive(Debug)]
pub struct Backbone {
    spec: BackboneSpec,
    engine: Engine,
}

const VGG_BGR_MEAN: [f32; 3] = [103.939, 116.779, 123.68];

impl Backbone {
    pub fn load(id: BackboneId, source: WeightSource, ingress: IngressMode) -> Result<Self, ModelError> {
        let engine = match (&source, id) {
            (WeightSource::Stub(cfg), BackboneId::Stub) => Engine::Stub(StubBackbone::new(*cfg)),
            (_, BackboneId::Stub) | (WeightSource::Stub(_), _) => {
                return Err(ModelError::UnsupportedWeightSource { backbone: id, detail: format!("{source:?}") })
            }
            (WeightSource::RandomSeeded { seed }, _) => Self::build_engine(id, &mut SeededWeights { seed: *seed })?,
            (WeightSource::Checkpoint { path }, _) => {
                if !path.is_file() {
                    return Err(ModelError::WeightArchiveMissing(path.clone()));
                }
                let container = Container::read(path)?;
                match container.metadata.get(BACKBONE_KEY) {
                    Some(found) if found == id.name() => {}
                    found => {
                        return Err(ModelError::BackboneMismatch {
                            expected: id.name().to_string(),
                            found: found.cloned().unwrap_or_else(|| "<none>".into()),
                        })
                    }
                }
                let mut provider = MapWeights::from_container(container)?;
                let engine = Self::build_engine(id, &mut provider)?;
                if let Some(extra) = provider.remaining().first() {
                    return Err(ModelError::ShapeMismatch {
                        layer: extra.to_string(),
                        detail: "tensor not used by the architecture".into(),
                    });
                }
                engine
            }
        };
        let (input_shape, feature_dim) = match &engine {
            Engine::Stub(s) => {
                let (h, w) = s.config().input_hw;
                ((h, w, 3), s.config().output_dim())
            }
            _ => ((224, 224, 3), id.terminal_shape().expect("conv backbone").2),
        };
        Ok(Backbone {
            spec: BackboneSpec { id, input_shape, feature_dim, frozen: true, weight_source: source, ingress },
            engine,
        })
    }

    /// A backbone that knows its shapes but holds no weights.
    pub fn detached(spec: BackboneSpec) -> Self {
        Backbone { spec, engine: Engine::Detached }
    }

    fn build_engine(id: BackboneId, p: &mut dyn WeightProvider) -> Result<Engine, ModelError> {
        Ok(match id {
            BackboneId::Vgg16 => Engine::Vgg16(Box::new(Vgg16::load(p)?)),
            BackboneId::ResNet50V2 => Engine::ResNet50V2(Box::new(ResNet50V2::load(p)?)),
            BackboneId::EfficientNetB0 => Engine::EfficientNetB0(Box::new(EfficientNetB0::load(p)?)),
            BackboneId::Stub => unreachable!("stub engines are not built from tensors"),
        })
    }

    /// Every tensor the architecture requests: `(name, shape, required)`.
    pub fn weight_layout(id: BackboneId) -> Result<Vec<(String, Vec<usize>, bool)>, ModelError> {
        let mut recorder = LayoutRecorder::default();
        if id != BackboneId::Stub {
            Self::build_engine(id, &mut recorder)?;
        }
        Ok(recorder.entries)
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn id(&self) -> BackboneId {
        self.spec.id
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    pub fn is_available(&self) -> bool {
        !matches!(self.engine, Engine::Detached)
    }

    /// Apply the ingress hook; returns the array fed to the first layer.
    pub fn ingress(&self, image: &ImageTensor) -> Array3<f32> {
        if self.spec.ingress == IngressMode::Passthrough {
            return image.data().clone();
        }
        match self.spec.id {
            BackboneId::Stub => image.to_domain(ValueDomain::Unit0To1).into_data(),
            BackboneId::EfficientNetB0 => image.to_domain(ValueDomain::Raw0To255).into_data(),
            BackboneId::ResNet50V2 => image.to_domain(ValueDomain::Raw0To255).into_data().mapv(|v| v / 127.5 - 1.0),
            BackboneId::Vgg16 => {
                let raw = image.to_domain(ValueDomain::Raw0To255).into_data();
                let mut bgr = raw.clone();
                for c in 0..3 {
                    let src = raw.index_axis(Axis(2), 2 - c);
                    bgr.index_axis_mut(Axis(2), c).assign(&src.mapv(|v| v - VGG_BGR_MEAN[c]));
                }
                bgr
            }
        }
    }

    fn check_shape(&self, image: &ImageTensor) -> Result<(), ModelError> {
        if image.shape() != self.spec.input_shape {
            return Err(ModelError::ShapeMismatch {
                layer: "input".into(),
                detail: format!("expected {:?}, got {:?}", self.spec.input_shape, image.shape()),
            });
        }
        Ok(())
    }

    /// Terminal feature map before pooling. The stub has no spatial map and
    /// returns its feature vector as a `1×1×d` map.
    pub fn feature_map(&self, image: &ImageTensor) -> Result<FeatureMap, ModelError> {
        self.check_shape(image)?;
        let x = self.ingress(image);
        Ok(match &self.engine {
            Engine::Vgg16(net) => net.forward(&x),
            Engine::ResNet50V2(net) => net.forward(&x),
            Engine::EfficientNetB0(net) => net.forward(&x),
            Engine::Stub(stub) => {
                let rescaled = ImageTensor::new(x, ValueDomain::Unit0To1).expect("shape checked");
                let v = stub.features(&rescaled);
                FeatureMap::from_shape_vec((1, 1, v.len()), v).expect("vector")
            }
            Engine::Detached => return Err(ModelError::BackboneUnavailable(self.spec.id)),
        })
    }

    pub fn features(&self, image: &ImageTensor) -> Result<Vec<f32>, ModelError> {
        let map = self.feature_map(image)?;
        Ok(global_average_pool(&map))
    }

    /// SHA-256 over the live weight buffers.
    pub fn weights_fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        let mut feed = |xs: &[f32]| {
            for x in xs {
                hasher.update(x.to_le_bytes());
            }
        };
        match &self.engine {
            Engine::Vgg16(n) => n.visit(&mut feed),
            Engine::ResNet50V2(n) => n.visit(&mut feed),
            Engine::EfficientNetB0(n) => n.visit(&mut feed),
            Engine::Stub(s) => {
                if let Some(p) = s.parameters() {
                    feed(p)
                }
            }
            Engine::Detached => {}
        }
        hex::encode(hasher.finalize())
    }
}
