//! Inference kernels for the frozen convolutional backbones.
//!
//! Feature maps are `H×W×C` channels-last `f32` arrays and kernels follow the
//! `kh×kw×cin×cout` layout of the converted checkpoints, so a convolution is
//! an im2col patch matrix times the reshaped kernel.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;

use super::weights::WeightProvider;
use crate::model::ModelError;

pub type FeatureMap = Array3<f32>;

/// Read-only traversal of a layer's tensors, used to fingerprint frozen weights.
pub trait VisitParams {
    fn visit(&self, f: &mut dyn FnMut(&[f32]));
}

/// Output rows per im2col block; bounds patch-matrix memory.
const IM2COL_BLOCK: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub const NONE: Padding = Padding { top: 0, bottom: 0, left: 0, right: 0 };

    pub fn uniform(p: usize) -> Padding {
        Padding { top: p, bottom: p, left: p, right: p }
    }

    /// TensorFlow `same` padding for stride 1.
    pub fn same(kernel: usize) -> Padding {
        let total = kernel - 1;
        Padding { top: total / 2, bottom: total - total / 2, left: total / 2, right: total - total / 2 }
    }

    /// Asymmetric pad used before stride-2 layers on even-sized inputs: one
    /// pixel less on the leading edge.
    pub fn downsample(kernel: usize, height: usize, width: usize) -> Padding {
        let half = kernel / 2;
        Padding { top: half - (1 - height % 2), bottom: half, left: half - (1 - width % 2), right: half }
    }
}

fn out_dim(input: usize, pad_a: usize, pad_b: usize, kernel: usize, stride: usize) -> usize {
    (input + pad_a + pad_b - kernel) / stride + 1
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `(kh·kw·cin) × cout`.
    kernel: Array2<f32>,
    bias: Option<Array1<f32>>,
    kh: usize,
    kw: usize,
    cin: usize,
    stride: usize,
    pad: Padding,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn load(
        p: &mut dyn WeightProvider,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        bias: bool,
        stride: usize,
        pad: Padding,
    ) -> Result<Self, ModelError> {
        let kernel = p.tensor(&format!("{name}/kernel"), &[k, k, cin, cout])?;
        let kernel = Array2::from_shape_vec((k * k * cin, cout), kernel).expect("shape checked by provider");
        let bias = if bias { Some(Array1::from(p.tensor(&format!("{name}/bias"), &[cout])?)) } else { None };
        Ok(Conv2d { kernel, bias, kh: k, kw: k, cin, stride, pad })
    }

    pub fn cout(&self) -> usize {
        self.kernel.ncols()
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        let x = x.as_standard_layout();
        let (h, w, c) = x.dim();
        assert_eq!(c, self.cin, "conv input channels");
        let oh = out_dim(h, self.pad.top, self.pad.bottom, self.kh, self.stride);
        let ow = out_dim(w, self.pad.left, self.pad.right, self.kw, self.stride);
        let cout = self.cout();
        let pointwise = self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == Padding::NONE;

        let mut out = Array2::<f32>::zeros((oh * ow, cout));
        if pointwise {
            let flat = x.view().into_shape_with_order((h * w, c)).expect("contiguous");
            out.axis_chunks_iter_mut(Axis(0), IM2COL_BLOCK)
                .into_par_iter()
                .zip(flat.axis_chunks_iter(Axis(0), IM2COL_BLOCK).into_par_iter())
                .for_each(|(mut dst, src)| dst.assign(&src.dot(&self.kernel)));
        } else {
            let k = self.kh * self.kw * self.cin;
            out.axis_chunks_iter_mut(Axis(0), IM2COL_BLOCK).into_par_iter().enumerate().for_each(|(block, mut dst)| {
                let start = block * IM2COL_BLOCK;
                let rows = dst.nrows();
                let mut cols = Array2::<f32>::zeros((rows, k));
                for r in 0..rows {
                    let (oy, ox) = ((start + r) / ow, (start + r) % ow);
                    let mut row = cols.row_mut(r);
                    let row = row.as_slice_mut().expect("standard layout");
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - self.pad.top as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - self.pad.left as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let offset = (ky * self.kw + kx) * self.cin;
                            let src = x.slice(s![iy as usize, ix as usize, ..]);
                            row[offset..offset + self.cin].copy_from_slice(src.as_slice().expect("contiguous"));
                        }
                    }
                }
                dst.assign(&cols.dot(&self.kernel));
            });
        }
        if let Some(bias) = &self.bias {
            out += bias;
        }
        out.into_shape_with_order((oh, ow, cout)).expect("sized")
    }
}

impl VisitParams for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&[f32])) {
        f(self.kernel.as_slice().expect("standard layout"));
        if let Some(b) = &self.bias {
            f(b.as_slice().expect("contiguous"));
        }
    }
}

#[derive(Debug, Clone)]
pub struct DepthwiseConv2d {
    /// `kh × kw × c`.
    kernel: Array3<f32>,
    stride: usize,
    pad: Padding,
}

impl DepthwiseConv2d {
    pub fn load(
        p: &mut dyn WeightProvider,
        name: &str,
        k: usize,
        channels: usize,
        stride: usize,
        pad: Padding,
    ) -> Result<Self, ModelError> {
        let kernel = p.tensor(&format!("{name}/depthwise_kernel"), &[k, k, channels, 1])?;
        let kernel = Array3::from_shape_vec((k, k, channels), kernel).expect("shape checked by provider");
        Ok(DepthwiseConv2d { kernel, stride, pad })
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        let x = x.as_standard_layout();
        let (h, w, c) = x.dim();
        let (kh, kw, kc) = self.kernel.dim();
        assert_eq!(c, kc, "depthwise channels");
        let oh = out_dim(h, self.pad.top, self.pad.bottom, kh, self.stride);
        let ow = out_dim(w, self.pad.left, self.pad.right, kw, self.stride);
        let mut out = Array3::<f32>::zeros((oh, ow, c));
        out.axis_iter_mut(Axis(0)).into_par_iter().enumerate().for_each(|(oy, mut plane)| {
            for ox in 0..ow {
                let mut acc = plane.row_mut(ox);
                let acc = acc.as_slice_mut().expect("standard layout");
                for ky in 0..kh {
                    let iy = (oy * self.stride + ky) as isize - self.pad.top as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * self.stride + kx) as isize - self.pad.left as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = x.slice(s![iy as usize, ix as usize, ..]);
                        let k = self.kernel.slice(s![ky, kx, ..]);
                        for ((a, &v), &wt) in acc.iter_mut().zip(src.iter()).zip(k.iter()) {
                            *a += v * wt;
                        }
                    }
                }
            }
        });
        out
    }
}

impl VisitParams for DepthwiseConv2d {
    fn visit(&self, f: &mut dyn FnMut(&[f32])) {
        f(self.kernel.as_slice().expect("standard layout"));
    }
}

/// Inference batch normalization folded to `x · scale + shift`.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    scale: Array1<f32>,
    shift: Array1<f32>,
}

impl BatchNorm {
    pub fn load(p: &mut dyn WeightProvider, name: &str, channels: usize, epsilon: f32) -> Result<Self, ModelError> {
        let gamma = p.tensor(&format!("{name}/gamma"), &[channels])?;
        let beta = p.tensor(&format!("{name}/beta"), &[channels])?;
        let mean = p.tensor(&format!("{name}/moving_mean"), &[channels])?;
        let var = p.tensor(&format!("{name}/moving_variance"), &[channels])?;
        let scale: Array1<f32> = (0..channels).map(|i| gamma[i] / (var[i] + epsilon).sqrt()).collect();
        let shift: Array1<f32> = (0..channels).map(|i| beta[i] - mean[i] * scale[i]).collect();
        Ok(BatchNorm { scale, shift })
    }

    pub fn forward(&self, mut x: FeatureMap) -> FeatureMap {
        x *= &self.scale;
        x += &self.shift;
        x
    }
}

impl VisitParams for BatchNorm {
    fn visit(&self, f: &mut dyn FnMut(&[f32])) {
        f(self.scale.as_slice().expect("contiguous"));
        f(self.shift.as_slice().expect("contiguous"));
    }
}

pub fn relu(mut x: FeatureMap) -> FeatureMap {
    x.par_mapv_inplace(|v| v.max(0.0));
    x
}

#[inline]
pub fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

pub fn swish(mut x: FeatureMap) -> FeatureMap {
    x.par_mapv_inplace(|v| v * sigmoid(v));
    x
}

pub fn zero_pad(x: &FeatureMap, pad: Padding) -> FeatureMap {
    let (h, w, c) = x.dim();
    let mut out = Array3::zeros((h + pad.top + pad.bottom, w + pad.left + pad.right, c));
    out.slice_mut(s![pad.top..pad.top + h, pad.left..pad.left + w, ..]).assign(x);
    out
}

/// Valid max pooling with a square window.
pub fn max_pool(x: &FeatureMap, window: usize, stride: usize) -> FeatureMap {
    let (h, w, c) = x.dim();
    let oh = out_dim(h, 0, 0, window, stride);
    let ow = out_dim(w, 0, 0, window, stride);
    let mut out = Array3::from_elem((oh, ow, c), f32::NEG_INFINITY);
    for oy in 0..oh {
        for ox in 0..ow {
            let mut dst = out.slice_mut(s![oy, ox, ..]);
            for ky in 0..window {
                for kx in 0..window {
                    let src = x.slice(s![oy * stride + ky, ox * stride + kx, ..]);
                    dst.zip_mut_with(&src, |d, &v| *d = d.max(v));
                }
            }
        }
    }
    out
}

/// Spatial mean per channel.
pub fn global_average_pool(x: &FeatureMap) -> Vec<f32> {
    let (h, w, c) = x.dim();
    let flat: ArrayView2<f32> = x.view().into_shape_with_order((h * w, c)).expect("contiguous feature map");
    let n = (h * w) as f64;
    (0..c).map(|ch| (flat.column(ch).iter().map(|&v| v as f64).sum::<f64>() / n) as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::backbone::weights::MapWeights;

    /// Direct six-loop convolution.
    fn naive_conv(x: &FeatureMap, kernel: &[f32], k: usize, cout: usize, stride: usize, pad: Padding) -> FeatureMap {
        let (h, w, cin) = x.dim();
        let oh = (h + pad.top + pad.bottom - k) / stride + 1;
        let ow = (w + pad.left + pad.right - k) / stride + 1;
        let mut out = Array3::zeros((oh, ow, cout));
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = 0.0f64;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad.top as isize;
                            let ix = (ox * stride + kx) as isize - pad.left as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                let wv = kernel[((ky * k + kx) * cin + ci) * cout + co];
                                acc += (x[[iy as usize, ix as usize, ci]] * wv) as f64;
                            }
                        }
                    }
                    out[[oy, ox, co]] = acc as f32;
                }
            }
        }
        out
    }

    fn ramp(h: usize, w: usize, c: usize) -> FeatureMap {
        Array3::from_shape_fn((h, w, c), |(y, x, ch)| ((y * 31 + x * 7 + ch * 3) % 17) as f32 / 8.0 - 1.0)
    }

    #[test]
    fn conv_matches_naive_loops() {
        let x = ramp(9, 8, 3);
        for (k, stride, pad) in
            [(3, 1, Padding::same(3)), (3, 2, Padding::downsample(3, 9, 8)), (1, 1, Padding::NONE), (1, 2, Padding::NONE), (5, 2, Padding::uniform(2))]
        {
            let cout = 4;
            let kernel: Vec<f32> = (0..k * k * 3 * cout).map(|i| ((i * 13) % 11) as f32 / 10.0 - 0.5).collect();
            let mut p = MapWeights::default();
            p.insert("c/kernel", vec![k, k, 3, cout], kernel.clone());
            let conv = Conv2d::load(&mut p, "c", k, 3, cout, false, stride, pad).unwrap();
            let got = conv.forward(&x);
            let want = naive_conv(&x, &kernel, k, cout, stride, pad);
            assert_eq!(got.dim(), want.dim());
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-4, "k={k} stride={stride}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn depthwise_matches_grouped_naive() {
        let x = ramp(7, 6, 3);
        let k = 3;
        let kernel: Vec<f32> = (0..k * k * 3).map(|i| (i % 5) as f32 - 2.0).collect();
        let mut p = MapWeights::default();
        p.insert("d/depthwise_kernel", vec![k, k, 3, 1], kernel.clone());
        let dw = DepthwiseConv2d::load(&mut p, "d", k, 3, 2, Padding::downsample(3, 7, 6)).unwrap();
        let got = dw.forward(&x);
        // a depthwise conv is a dense conv whose kernel is zero off the channel diagonal
        let mut dense = vec![0.0f32; k * k * 3 * 3];
        for t in 0..k * k {
            for c in 0..3 {
                dense[(t * 3 + c) * 3 + c] = kernel[t * 3 + c];
            }
        }
        let want = naive_conv(&x, &dense, k, 3, 2, Padding::downsample(3, 7, 6));
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn padding_rules() {
        assert_eq!(Padding::same(5), Padding::uniform(2));
        assert_eq!(Padding::downsample(3, 224, 224), Padding { top: 0, bottom: 1, left: 0, right: 1 });
        assert_eq!(Padding::downsample(5, 28, 28), Padding { top: 1, bottom: 2, left: 1, right: 2 });
        assert_eq!(Padding::downsample(3, 7, 7), Padding::uniform(1));
    }

    #[test]
    fn pooling() {
        let x = ramp(4, 4, 2);
        let p = max_pool(&x, 2, 2);
        assert_eq!(p.dim(), (2, 2, 2));
        assert_eq!(p[[0, 0, 0]], [x[[0, 0, 0]], x[[0, 1, 0]], x[[1, 0, 0]], x[[1, 1, 0]]].into_iter().fold(f32::MIN, f32::max));
        let g = global_average_pool(&Array3::from_elem((3, 5, 2), 0.25));
        assert_eq!(g, vec![0.25, 0.25]);
        let padded = zero_pad(&x, Padding { top: 1, bottom: 0, left: 0, right: 2 });
        assert_eq!(padded.dim(), (5, 6, 2));
        assert_eq!(padded[[0, 0, 0]], 0.0);
        assert_eq!(padded[[1, 0, 1]], x[[0, 0, 1]]);
    }
}
