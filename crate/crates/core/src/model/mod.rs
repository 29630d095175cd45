//! Frozen backbones plus the trainable dense classification head.

pub mod backbone;
pub mod head;

use std::path::PathBuf;
use std::sync::Arc;

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use thiserror::Error;

pub use self::backbone::{Backbone, BackboneId, BackboneSpec, IngressMode, WeightSource};
pub use self::head::{
    categorical_cross_entropy, head_backward, head_forward, one_hot, softmax, DenseHead, HeadCache, HeadGradients,
    HeadSpec,
};
use crate::container::ContainerError;
use crate::dataset::{GradeLabel, NUM_CLASSES};
use crate::preprocess::ImageTensor;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown backbone `{0}`")]
    UnknownBackbone(String),
    #[error("weight archive not found: {}", .0.display())]
    WeightArchiveMissing(PathBuf),
    #[error("backbone {backbone} cannot use weight source {detail}")]
    UnsupportedWeightSource { backbone: BackboneId, detail: String },
    #[error("shape mismatch at `{layer}`: {detail}")]
    ShapeMismatch { layer: String, detail: String },
    #[error("backbone {0} has no weights attached")]
    BackboneUnavailable(BackboneId),
    #[error("target row {row} is not one-hot")]
    NotOneHot { row: usize },
    #[error("activation cache does not belong to the current head parameters")]
    StaleCache,
    #[error("checkpoint is for backbone {found}, expected {expected}")]
    BackboneMismatch { expected: String, found: String },
    #[error("invalid head spec: {0}")]
    InvalidHead(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

/// Frozen backbone shared by reference plus an owned trainable head.
#[derive(Debug, Clone)]
pub struct ClassifierModel {
    pub backbone: Arc<Backbone>,
    pub head: DenseHead,
    pub num_classes: usize,
}

pub fn build_model(
    backbone_id: BackboneId,
    head_spec: &HeadSpec,
    weight_source: WeightSource,
    ingress: IngressMode,
    init_seed: u64,
) -> Result<ClassifierModel, ModelError> {
    let backbone = Backbone::load(backbone_id, weight_source, ingress)?;
    ClassifierModel::new(Arc::new(backbone), head_spec, init_seed)
}

impl ClassifierModel {
    pub fn new(backbone: Arc<Backbone>, head_spec: &HeadSpec, init_seed: u64) -> Result<Self, ModelError> {
        let head = DenseHead::init(backbone.feature_dim(), head_spec, init_seed)?;
        Ok(ClassifierModel { backbone, head, num_classes: NUM_CLASSES })
    }

    /// Pooled backbone features, one row per image, widened to f64.
    pub fn extract_features(&self, images: &[ImageTensor]) -> Result<Array2<f64>, ModelError> {
        let rows: Vec<Vec<f32>> = images.par_iter().map(|img| self.backbone.features(img)).collect::<Result<_, _>>()?;
        let dim = self.backbone.feature_dim();
        let mut out = Array2::zeros((rows.len(), dim));
        for (mut dst, src) in out.rows_mut().into_iter().zip(&rows) {
            dst.iter_mut().zip(src).for_each(|(d, &s)| *d = f64::from(s));
        }
        Ok(out)
    }

    pub fn predict(&self, images: &[ImageTensor]) -> Result<(Array2<f64>, Vec<GradeLabel>), ModelError> {
        let features = self.extract_features(images)?;
        self.predict_features(&features)
    }

    pub fn predict_features(&self, features: &Array2<f64>) -> Result<(Array2<f64>, Vec<GradeLabel>), ModelError> {
        let (probs, _) = head_forward(&self.head, features)?;
        let labels = probs.rows().into_iter().map(|r| GradeLabel::from_index(argmax(r)).expect("five classes")).collect();
        Ok((probs, labels))
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::backbone::stub::StubConfig;
    use super::*;
    use crate::preprocess::ValueDomain;
    use ndarray::array;

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(array![0.1, 0.6, 0.1, 0.1, 0.1].view()), 1);
        assert_eq!(argmax(array![0.2, 0.2, 0.2, 0.2, 0.2].view()), 0);
        assert_eq!(argmax(array![0.1, 0.3, 0.1, 0.3, 0.2].view()), 1);
    }

    #[test]
    fn stub_model_predicts_deterministically() {
        let model = build_model(
            BackboneId::Stub,
            &HeadSpec::default(),
            WeightSource::Stub(StubConfig::default()),
            IngressMode::Native,
            3,
        )
        .unwrap();
        assert_eq!(model.head.spec().layer_widths, vec![256, 128, 128, 5]);
        assert_eq!(model.head.weights()[0].dim(), (64, 256));
        let images: Vec<ImageTensor> = (0..4)
            .map(|i| ImageTensor::filled(32, 32, 0.2 * i as f32, ValueDomain::Unit0To1))
            .collect();
        let (p1, l1) = model.predict(&images).unwrap();
        let (p2, l2) = model.predict(&images).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(l1, l2);
    }

    #[test]
    fn unknown_backbone_name() {
        assert!(matches!("AlexNet".parse::<BackboneId>(), Err(ModelError::UnknownBackbone(_))));
    }
}
