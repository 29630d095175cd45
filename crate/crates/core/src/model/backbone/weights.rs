//! Where backbone tensors come from.
//!
//! Architectures request every tensor by name and expected shape through a
//! [`WeightProvider`]. Names follow `<layer>/<role>` with roles `kernel`,
//! `depthwise_kernel`, `bias`, `gamma`, `beta`, `moving_mean`,
//! `moving_variance`, `mean`, `variance` and `scale`; `tools/keras_backbones.py`
//! writes converted checkpoints with the same names.

use std::collections::HashMap;

use crate::container::{ArrayData, Container, NamedArray};
use crate::model::ModelError;
use crate::seed::keyed_uniform;

pub trait WeightProvider {
    /// A required tensor with exactly `shape`, flattened row-major.
    fn tensor(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f32>, ModelError>;

    /// A tensor that some weight sources carry and others omit.
    fn optional(&mut self, name: &str, shape: &[usize]) -> Result<Option<Vec<f32>>, ModelError>;
}

/// Tensors held in memory, typically read from a converted checkpoint.
#[derive(Debug, Default)]
pub struct MapWeights {
    arrays: HashMap<String, (Vec<usize>, Vec<f32>)>,
}

impl MapWeights {
    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) {
        self.arrays.insert(name.to_string(), (shape, data));
    }

    pub fn from_container(container: Container) -> Result<Self, ModelError> {
        let mut map = MapWeights::default();
        for (name, NamedArray { shape, data }) in container.into_map() {
            match data {
                ArrayData::F32(v) => map.insert(&name, shape, v),
                ArrayData::F64(_) => {
                    return Err(ModelError::ShapeMismatch { layer: name, detail: "backbone tensors must be float32".into() })
                }
            }
        }
        Ok(map)
    }

    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Option<Vec<f32>>, ModelError> {
        match self.arrays.remove(name) {
            None => Ok(None),
            Some((found, data)) if found == shape => Ok(Some(data)),
            Some((found, _)) => Err(ModelError::ShapeMismatch {
                layer: name.to_string(),
                detail: format!("expected {shape:?}, checkpoint has {found:?}"),
            }),
        }
    }

    pub fn remaining(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self.arrays.keys().map(String::as_str).collect();
        names.sort();
        names
    }
}

impl WeightProvider for MapWeights {
    fn tensor(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f32>, ModelError> {
        self.take(name, shape)?.ok_or_else(|| ModelError::ShapeMismatch {
            layer: name.to_string(),
            detail: "missing from checkpoint".into(),
        })
    }

    fn optional(&mut self, name: &str, shape: &[usize]) -> Result<Option<Vec<f32>>, ModelError> {
        self.take(name, shape)
    }
}

/// Deterministic synthetic weights keyed by `(seed, tensor name, index)`.
///
/// Kernels are uniform with He-style bound `sqrt(6 / fan_in)`; batch-norm
/// statistics stay near identity so activations neither vanish nor explode
/// through deep stacks. Optional tensors are never produced.
#[derive(Debug, Clone, Copy)]
pub struct SeededWeights {
    pub seed: u64,
}

impl SeededWeights {
    pub fn value(&self, name: &str, shape: &[usize], index: u64) -> f32 {
        let u = keyed_uniform(self.seed, name, index);
        let role = name.rsplit('/').next().unwrap_or(name);
        match role {
            "kernel" | "depthwise_kernel" => {
                let fan_in: usize = if role == "kernel" {
                    shape[..shape.len() - 1].iter().product()
                } else {
                    shape[0] * shape[1]
                };
                u * ((6.0f64 / fan_in as f64).sqrt() as f32)
            }
            "bias" => 0.05f32 * u,
            "gamma" => 1.0f32 + 0.1f32 * u,
            "beta" | "moving_mean" => 0.1f32 * u,
            "moving_variance" => 1.0f32 + 0.25f32 * u,
            "mean" => 0.45f32 + 0.05f32 * u,
            "variance" => 0.06f32 + 0.01f32 * u,
            _ => 0.1f32 * u,
        }
    }
}

impl WeightProvider for SeededWeights {
    fn tensor(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f32>, ModelError> {
        let n: usize = shape.iter().product();
        Ok((0..n as u64).map(|i| self.value(name, shape, i)).collect())
    }

    fn optional(&mut self, _name: &str, _shape: &[usize]) -> Result<Option<Vec<f32>>, ModelError> {
        Ok(None)
    }
}

/// Records requested names and shapes, returning zeros.
#[derive(Debug, Default)]
pub struct LayoutRecorder {
    pub entries: Vec<(String, Vec<usize>, bool)>,
}

impl WeightProvider for LayoutRecorder {
    fn tensor(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f32>, ModelError> {
        self.entries.push((name.to_string(), shape.to_vec(), true));
        Ok(vec![0.0; shape.iter().product()])
    }

    fn optional(&mut self, name: &str, shape: &[usize]) -> Result<Option<Vec<f32>>, ModelError> {
        self.entries.push((name.to_string(), shape.to_vec(), false));
        Ok(None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_weights_shape_checks() {
        let mut m = MapWeights::default();
        m.insert("a/kernel", vec![1, 1, 2, 3], vec![0.0; 6]);
        assert!(matches!(m.tensor("a/kernel", &[1, 1, 3, 2]), Err(ModelError::ShapeMismatch { .. })));
        assert!(matches!(m.tensor("b/kernel", &[1]), Err(ModelError::ShapeMismatch { .. })));
        assert_eq!(m.optional("c/scale", &[3]).unwrap(), None);
    }

    #[test]
    fn seeded_scales() {
        let s = SeededWeights { seed: 3 };
        let k = s.value("x/kernel", &[3, 3, 64, 64], 17);
        assert!(k.abs() <= (6.0f32 / 576.0).sqrt());
        let v = s.value("x_bn/moving_variance", &[8], 2);
        assert!((0.75..1.25).contains(&v));
        let dw = s.value("d/depthwise_kernel", &[5, 5, 32, 1], 0);
        assert!(dw.abs() <= (6.0f32 / 25.0).sqrt());
    }
}
