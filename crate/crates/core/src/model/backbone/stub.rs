//! Desk-scale stand-in backbone: a frozen, seeded random projection of the
//! flattened image, or the flattened image itself.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::preprocess::ImageTensor;
use crate::seed::keyed_uniform;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StubMode {
    Projection,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StubConfig {
    pub mode: StubMode,
    /// Input height and width; images are resized to this before extraction.
    pub input_hw: (usize, usize),
    /// Ignored in identity mode, where it is `h · w · 3`.
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for StubConfig {
    fn default() -> Self {
        StubConfig { mode: StubMode::Projection, input_hw: (32, 32), feature_dim: 64, seed: 0 }
    }
}

impl StubConfig {
    pub fn identity(height: usize, width: usize) -> Self {
        StubConfig { mode: StubMode::Identity, input_hw: (height, width), feature_dim: height * width * 3, seed: 0 }
    }

    pub fn input_len(&self) -> usize {
        self.input_hw.0 * self.input_hw.1 * 3
    }

    pub fn output_dim(&self) -> usize {
        match self.mode {
            StubMode::Projection => self.feature_dim,
            StubMode::Identity => self.input_len(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StubBackbone {
    config: StubConfig,
    /// `feature_dim × input_len`, entries with variance `1 / input_len`.
    projection: Option<Array2<f32>>,
}

impl StubBackbone {
    pub fn new(config: StubConfig) -> Self {
        let projection = match config.mode {
            StubMode::Identity => None,
            StubMode::Projection => {
                let n = config.input_len();
                let scale = (3.0f64 / n as f64).sqrt() as f32;
                Some(Array2::from_shape_fn((config.feature_dim, n), |(f, i)| {
                    keyed_uniform(config.seed, "stub/projection", (f * n + i) as u64) * scale
                }))
            }
        };
        StubBackbone { config, projection }
    }

    pub fn config(&self) -> &StubConfig {
        &self.config
    }

    pub fn features(&self, image: &ImageTensor) -> Vec<f32> {
        let flat: Array1<f32> = image.data().iter().copied().collect();
        match &self.projection {
            None => flat.to_vec(),
            Some(w) => w.dot(&flat).to_vec(),
        }
    }

    pub fn parameters(&self) -> Option<&[f32]> {
        self.projection.as_ref().and_then(|p| p.as_slice())
    }
}
