//! Four-layer dense head in f64: ReLU hidden layers, softmax output, and the
//! analytic gradient of mean categorical cross-entropy.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, Axis, Zip};
use rand::distributions::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::dataset::NUM_CLASSES;
use crate::seed::{derive_seed, seeded_rng};

pub const HEAD_DEPTH: usize = 4;
pub const HIDDEN_ACTIVATION: &str = "relu";
pub const OUTPUT_ACTIVATION: &str = "softmax";
pub const HEAD_INIT: &str = "uniform(+-sqrt(6/(fan_in+fan_out))), zero bias";
/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub layer_widths: Vec<usize>,
}

impl Default for HeadSpec {
    fn default() -> Self {
        HeadSpec { layer_widths: vec![256, 128, 128, NUM_CLASSES] }
    }
}

impl HeadSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        let w = &self.layer_widths;
        if w.len() != HEAD_DEPTH {
            return Err(ModelError::InvalidHead(format!("expected {HEAD_DEPTH} layers, got {}", w.len())));
        }
        if w[HEAD_DEPTH - 1] != NUM_CLASSES {
            return Err(ModelError::InvalidHead(format!("last width must be {NUM_CLASSES}, got {}", w[HEAD_DEPTH - 1])));
        }
        if w.contains(&0) {
            return Err(ModelError::InvalidHead("layer widths must be positive".into()));
        }
        Ok(())
    }
}

static NEXT_HEAD_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_HEAD_ID.fetch_add(1, Ordering::Relaxed)
}

/// Layer `i` maps `x` to `x · weights[i] + biases[i]`; weights are
/// `fan_in × fan_out`.
///
/// Every mutable access bumps a generation counter, and every clone gets a new
/// identity, so a [`HeadCache`] can only be consumed by the exact parameters
/// that produced it.
#[derive(Debug)]
pub struct DenseHead {
    spec: HeadSpec,
    input_dim: usize,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    id: u64,
    generation: u64,
}

impl Clone for DenseHead {
    fn clone(&self) -> Self {
        DenseHead {
            spec: self.spec.clone(),
            input_dim: self.input_dim,
            weights: self.weights.clone(),
            biases: self.biases.clone(),
            id: fresh_id(),
            generation: 0,
        }
    }
}

impl PartialEq for DenseHead {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.weights == other.weights && self.biases == other.biases
    }
}

impl DenseHead {
    pub fn init(input_dim: usize, spec: &HeadSpec, seed: u64) -> Result<Self, ModelError> {
        spec.validate()?;
        if input_dim == 0 {
            return Err(ModelError::InvalidHead("input width must be positive".into()));
        }
        let mut weights = Vec::with_capacity(HEAD_DEPTH);
        let mut biases = Vec::with_capacity(HEAD_DEPTH);
        let mut fan_in = input_dim;
        for (layer, &fan_out) in spec.layer_widths.iter().enumerate() {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit);
            let mut rng = seeded_rng(derive_seed(seed, &[layer as u64]));
            weights.push(Array2::from_shape_simple_fn((fan_in, fan_out), || dist.sample(&mut rng)));
            biases.push(Array1::zeros(fan_out));
            fan_in = fan_out;
        }
        Ok(DenseHead { spec: spec.clone(), input_dim, weights, biases, id: fresh_id(), generation: 0 })
    }

    /// Rebuild from stored tensors, checking every shape against the layer widths.
    pub fn from_parts(
        input_dim: usize,
        spec: &HeadSpec,
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
    ) -> Result<Self, ModelError> {
        spec.validate()?;
        if weights.len() != HEAD_DEPTH || biases.len() != HEAD_DEPTH {
            return Err(ModelError::ShapeMismatch { layer: "head".into(), detail: "wrong layer count".into() });
        }
        let mut fan_in = input_dim;
        for (i, &fan_out) in spec.layer_widths.iter().enumerate() {
            if weights[i].dim() != (fan_in, fan_out) || biases[i].len() != fan_out {
                return Err(ModelError::ShapeMismatch {
                    layer: format!("dense_{}", i + 1),
                    detail: format!("expected ({fan_in}, {fan_out}), got {:?}", weights[i].dim()),
                });
            }
            fan_in = fan_out;
        }
        Ok(DenseHead { spec: spec.clone(), input_dim, weights, biases, id: fresh_id(), generation: 0 })
    }

    pub fn spec(&self) -> &HeadSpec {
        &self.spec
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    /// Parameter tensor names, ordered `W1, b1, …, W4, b4`.
    pub fn parameter_names() -> Vec<String> {
        (1..=HEAD_DEPTH).flat_map(|i| [format!("head/dense_{i}/kernel"), format!("head/dense_{i}/bias")]).collect()
    }

    pub fn parameter_shapes(&self) -> Vec<Vec<usize>> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.shape().to_vec(), b.shape().to_vec()])
            .collect()
    }

    pub fn parameters(&self) -> Vec<&[f64]> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.as_slice().expect("standard layout"), b.as_slice().expect("contiguous")])
            .collect()
    }

    /// Mutable parameter slices in [`parameters`](Self::parameters) order.
    /// Invalidates outstanding caches.
    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        self.generation += 1;
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w.as_slice_mut().expect("standard layout"), b.as_slice_mut().expect("contiguous")])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }
}

/// Per-layer inputs and pre-activations from one forward pass.
#[derive(Debug, Clone)]
pub struct HeadCache {
    head_id: u64,
    generation: u64,
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
    pub probabilities: Array2<f64>,
}

impl HeadCache {
    pub fn logits(&self) -> &Array2<f64> {
        &self.pre_activations[HEAD_DEPTH - 1]
    }

    pub fn pre_activations(&self) -> &[Array2<f64>] {
        &self.pre_activations
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl HeadGradients {
    /// Gradient slices in the same order as [`DenseHead::parameters`].
    pub fn slices(&self) -> Vec<&[f64]> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.as_slice().expect("standard layout"), b.as_slice().expect("contiguous")])
            .collect()
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

pub fn head_forward(head: &DenseHead, features: &Array2<f64>) -> Result<(Array2<f64>, HeadCache), ModelError> {
    if features.ncols() != head.input_dim {
        return Err(ModelError::ShapeMismatch {
            layer: "dense_1".into(),
            detail: format!("expected {} features, got {}", head.input_dim, features.ncols()),
        });
    }
    let mut inputs = Vec::with_capacity(HEAD_DEPTH);
    let mut pre_activations = Vec::with_capacity(HEAD_DEPTH);
    let mut x = features.as_standard_layout().into_owned();
    for (i, (w, b)) in head.weights.iter().zip(&head.biases).enumerate() {
        let z = x.dot(w) + b;
        let next = if i + 1 < HEAD_DEPTH { z.mapv(|v| v.max(0.0)) } else { softmax(&z) };
        inputs.push(x);
        pre_activations.push(z);
        x = next;
    }
    let cache = HeadCache { head_id: head.id, generation: head.generation, inputs, pre_activations, probabilities: x.clone() };
    Ok((x, cache))
}

/// Mean over the batch of `-ln(p_true)`, with `p` floored at [`PROB_FLOOR`].
pub fn categorical_cross_entropy(probabilities: &Array2<f64>, targets: &Array2<f64>) -> Result<f64, ModelError> {
    if probabilities.dim() != targets.dim() {
        return Err(ModelError::ShapeMismatch {
            layer: "loss".into(),
            detail: format!("probabilities {:?} vs targets {:?}", probabilities.dim(), targets.dim()),
        });
    }
    let true_index = one_hot_indices(targets)?;
    if true_index.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = true_index
        .iter()
        .enumerate()
        .map(|(row, &c)| -probabilities[[row, c]].clamp(PROB_FLOOR, 1.0).ln())
        .sum();
    Ok(total / true_index.len() as f64)
}

fn one_hot_indices(targets: &Array2<f64>) -> Result<Vec<usize>, ModelError> {
    targets
        .rows()
        .into_iter()
        .enumerate()
        .map(|(row, r)| {
            let ones: Vec<usize> = r.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(i, _)| i).collect();
            let valid = ones.len() == 1 && r.iter().all(|&v| v == 0.0 || v == 1.0);
            if valid {
                Ok(ones[0])
            } else {
                Err(ModelError::NotOneHot { row })
            }
        })
        .collect()
}

pub fn one_hot(indices: &[usize], classes: usize) -> Array2<f64> {
    let mut out = Array2::zeros((indices.len(), classes));
    for (row, &c) in indices.iter().enumerate() {
        out[[row, c]] = 1.0;
    }
    out
}

/// Exact gradient of mean cross-entropy with respect to every head parameter.
pub fn head_backward(head: &DenseHead, cache: &HeadCache, targets: &Array2<f64>) -> Result<HeadGradients, ModelError> {
    if cache.head_id != head.id || cache.generation != head.generation {
        return Err(ModelError::StaleCache);
    }
    if targets.dim() != cache.probabilities.dim() {
        return Err(ModelError::ShapeMismatch {
            layer: "loss".into(),
            detail: format!("targets {:?} vs probabilities {:?}", targets.dim(), cache.probabilities.dim()),
        });
    }
    one_hot_indices(targets)?;
    let batch = targets.nrows().max(1) as f64;
    let mut delta = (&cache.probabilities - targets) / batch;
    let mut weights = vec![Array2::zeros((0, 0)); HEAD_DEPTH];
    let mut biases = vec![Array1::zeros(0); HEAD_DEPTH];
    for layer in (0..HEAD_DEPTH).rev() {
        weights[layer] = cache.inputs[layer].t().dot(&delta);
        biases[layer] = delta.sum_axis(Axis(0));
        if layer > 0 {
            let mut upstream = delta.dot(&head.weights[layer].t());
            Zip::from(&mut upstream).and(&cache.pre_activations[layer - 1]).for_each(|g, &z| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            });
            delta = upstream;
        }
    }
    Ok(HeadGradients { weights, biases })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn toy(seed: u64) -> (DenseHead, Array2<f64>, Array2<f64>) {
        let spec = HeadSpec { layer_widths: vec![7, 6, 5, 5] };
        let head = DenseHead::init(3, &spec, seed).unwrap();
        let mut rng = seeded_rng(seed + 100);
        let x = Array2::from_shape_simple_fn((4, 3), || rng.gen_range(-1.0..1.0));
        let y = one_hot(&[0, 3, 4, 1], 5);
        (head, x, y)
    }

    #[test]
    fn spec_validation() {
        assert!(HeadSpec::default().validate().is_ok());
        assert!(HeadSpec { layer_widths: vec![256, 128, 5] }.validate().is_err());
        assert!(HeadSpec { layer_widths: vec![256, 128, 128, 4] }.validate().is_err());
        assert!(HeadSpec { layer_widths: vec![256, 0, 128, 5] }.validate().is_err());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = DenseHead::init(64, &HeadSpec::default(), 5).unwrap();
        let b = DenseHead::init(64, &HeadSpec::default(), 5).unwrap();
        let c = DenseHead::init(64, &HeadSpec::default(), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let limit = (6.0f64 / (64.0 + 256.0)).sqrt();
        assert!(a.weights()[0].iter().all(|w| w.abs() <= limit));
        assert!(a.biases().iter().all(|b| b.iter().all(|&v| v == 0.0)));
        assert_eq!(a.parameter_count(), 64 * 256 + 256 + 256 * 128 + 128 + 128 * 128 + 128 + 128 * 5 + 5);
    }

    #[test]
    fn softmax_constant_and_shift() {
        let p = softmax(&array![[3.0, 3.0, 3.0, 3.0, 3.0]]);
        assert!(p.iter().all(|&v| (v - 0.2).abs() < 1e-15));
        let z = array![[0.3, -1.2, 2.0, 0.0, 0.7]];
        let shifted = softmax(&z.mapv(|v| v + 41.5));
        Zip::from(&softmax(&z)).and(&shifted).for_each(|a, b| assert!((a - b).abs() < 1e-12));
    }

    #[test]
    fn forward_matches_loops() {
        let (head, x, _) = toy(1);
        let (p, _) = head_forward(&head, &x).unwrap();
        for n in 0..x.nrows() {
            let mut a: Vec<f64> = x.row(n).to_vec();
            for l in 0..HEAD_DEPTH {
                let w = &head.weights()[l];
                let mut z = vec![0.0; w.ncols()];
                for (j, zj) in z.iter_mut().enumerate() {
                    *zj = head.biases()[l][j];
                    for (i, ai) in a.iter().enumerate() {
                        *zj += ai * w[[i, j]];
                    }
                }
                a = if l < HEAD_DEPTH - 1 {
                    z.iter().map(|v| v.max(0.0)).collect()
                } else {
                    let m = z.iter().cloned().fold(f64::MIN, f64::max);
                    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                    let s: f64 = e.iter().sum();
                    e.iter().map(|v| v / s).collect()
                };
            }
            for (j, v) in a.iter().enumerate() {
                assert!((v - p[[n, j]]).abs() < 1e-10);
            }
            assert!((p.row(n).sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn cross_entropy_values() {
        let uniform = Array2::from_elem((3, 5), 0.2);
        let y = one_hot(&[0, 2, 4], 5);
        assert!((categorical_cross_entropy(&uniform, &y).unwrap() - 5f64.ln()).abs() < 1e-12);
        assert_eq!(categorical_cross_entropy(&y, &y).unwrap(), 0.0);
        let saturated = one_hot(&[1, 1, 1], 5);
        assert!((categorical_cross_entropy(&saturated, &y).unwrap() + PROB_FLOOR.ln()).abs() < 1e-9);
        let bad = array![[0.5, 0.5, 0.0, 0.0, 0.0]];
        assert!(matches!(categorical_cross_entropy(&uniform.slice(ndarray::s![..1, ..]).to_owned(), &bad), Err(ModelError::NotOneHot { row: 0 })));
        assert!(matches!(categorical_cross_entropy(&uniform, &one_hot(&[0], 5)), Err(ModelError::ShapeMismatch { .. })));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let (mut head, x, y) = toy(2);
        let (_, cache) = head_forward(&head, &x).unwrap();
        assert!(head_backward(&head, &cache, &y).is_ok());
        let copy = head.clone();
        assert!(matches!(head_backward(&copy, &cache, &y), Err(ModelError::StaleCache)));
        head.parameters_mut()[0][0] += 0.0;
        assert!(matches!(head_backward(&head, &cache, &y), Err(ModelError::StaleCache)));
    }

    #[test]
    fn output_gradient_is_probability_error() {
        let (head, x, y) = toy(3);
        let (p, cache) = head_forward(&head, &x).unwrap();
        let g = head_backward(&head, &cache, &y).unwrap();
        let delta = (&p - &y) / 4.0;
        let expected = cache.inputs[3].t().dot(&delta);
        Zip::from(&g.weights[3]).and(&expected).for_each(|a, b| assert!((a - b).abs() < 1e-15));
        Zip::from(&g.biases[3]).and(&delta.sum_axis(Axis(0))).for_each(|a, b| assert!((a - b).abs() < 1e-15));
    }

    #[test]
    fn finite_differences_agree() {
        for seed in 0..5 {
            let (mut head, x, y) = toy(seed);
            let (_, cache) = head_forward(&head, &x).unwrap();
            let grads = head_backward(&head, &cache, &y).unwrap();
            let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
            let h = 1e-5;
            for (t, g) in analytic.iter().enumerate() {
                for i in 0..g.len() {
                    let orig = head.parameters()[t][i];
                    head.parameters_mut()[t][i] = orig + h;
                    let lp = categorical_cross_entropy(&head_forward(&head, &x).unwrap().0, &y).unwrap();
                    head.parameters_mut()[t][i] = orig - h;
                    let lm = categorical_cross_entropy(&head_forward(&head, &x).unwrap().0, &y).unwrap();
                    head.parameters_mut()[t][i] = orig;
                    let numeric = (lp - lm) / (2.0 * h);
                    let rel = (g[i] - numeric).abs() / g[i].abs().max(numeric.abs()).max(1e-8);
                    assert!(rel <= 1e-4 || (g[i] - numeric).abs() < 1e-9, "tensor {t} entry {i}: {} vs {numeric}", g[i]);
                }
            }
        }
    }

    #[test]
    fn zero_error_gives_zero_gradients() {
        // logits driven far apart make the softmax output exactly one-hot
        let spec = HeadSpec { layer_widths: vec![2, 2, 2, 5] };
        let mut head = DenseHead::init(1, &spec, 0).unwrap();
        {
            let mut p = head.parameters_mut();
            p[0].copy_from_slice(&[1.0, 0.0]);
            p[2].copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
            p[4].copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
            p[6].copy_from_slice(&[0.0, 0.0, 1000.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        }
        let x = array![[1.0], [2.0]];
        let y = one_hot(&[2, 2], 5);
        let (p, cache) = head_forward(&head, &x).unwrap();
        assert_eq!(p, y);
        let g = head_backward(&head, &cache, &y).unwrap();
        assert!(g.slices().iter().all(|s| s.iter().all(|&v| v == 0.0)));
    }
}
