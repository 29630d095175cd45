//! EfficientNetB0 convolutional base.
//!
//! | stage | operator            | resolution | channels | layers |
//! |-------|---------------------|------------|----------|--------|
//! | 1     | Conv3x3             | 224×224    | 32       | 1      |
//! | 2     | MBConv1, k3×3       | 112×112    | 16       | 1      |
//! | 3     | MBConv6, k3×3       | 112×112    | 24       | 2      |
//! | 4     | MBConv6, k5×5       | 56×56      | 40       | 2      |
//! | 5     | MBConv6, k3×3       | 28×28      | 80       | 3      |
//! | 6     | MBConv6, k5×5       | 14×14      | 112      | 3      |
//! | 7     | MBConv6, k5×5       | 14×14      | 192      | 4      |
//! | 8     | MBConv6, k3×3       | 7×7        | 320      | 1      |
//! | 9     | Conv1x1 (+ pooling) | 7×7        | 1280     | 1      |
//!
//! Input scaling to `[0, 1]` and per-channel normalization are part of the
//! network, so it takes raw `[0, 255]` pixels.

use ndarray::{Array1, Axis};

use super::ops::{
    global_average_pool, sigmoid, swish, BatchNorm, Conv2d, DepthwiseConv2d, FeatureMap, Padding, VisitParams,
};
use super::weights::WeightProvider;
use crate::model::ModelError;

const BN_EPSILON: f32 = 1e-3;
const NORM_EPSILON: f32 = 1e-7;
const SE_RATIO: f64 = 0.25;

/// `(kernel, repeats, filters_in, filters_out, expand_ratio, stride)` per stage.
const STAGES: [(usize, usize, usize, usize, usize, usize); 7] = [
    (3, 1, 32, 16, 1, 1),
    (3, 2, 16, 24, 6, 2),
    (5, 2, 24, 40, 6, 2),
    (3, 3, 40, 80, 6, 2),
    (5, 3, 80, 112, 6, 1),
    (5, 4, 112, 192, 6, 2),
    (3, 1, 192, 320, 6, 1),
];

pub const FEATURE_DIM: usize = 1280;

#[derive(Debug, Clone)]
struct MbConv {
    expand: Option<(Conv2d, BatchNorm)>,
    dwconv: DepthwiseConv2d,
    bn: BatchNorm,
    se_reduce: Conv2d,
    se_expand: Conv2d,
    project: Conv2d,
    project_bn: BatchNorm,
    residual: bool,
}

impl MbConv {
    #[allow(clippy::too_many_arguments)]
    fn load(
        p: &mut dyn WeightProvider,
        name: &str,
        kernel: usize,
        filters_in: usize,
        filters_out: usize,
        expand_ratio: usize,
        stride: usize,
        spatial: usize,
    ) -> Result<Self, ModelError> {
        let filters = filters_in * expand_ratio;
        let expand = if expand_ratio != 1 {
            Some((
                Conv2d::load(p, &format!("{name}expand_conv"), 1, filters_in, filters, false, 1, Padding::NONE)?,
                BatchNorm::load(p, &format!("{name}expand_bn"), filters, BN_EPSILON)?,
            ))
        } else {
            None
        };
        let pad = if stride == 2 { Padding::downsample(kernel, spatial, spatial) } else { Padding::same(kernel) };
        let filters_se = ((filters_in as f64 * SE_RATIO) as usize).max(1);
        Ok(MbConv {
            expand,
            dwconv: DepthwiseConv2d::load(p, &format!("{name}dwconv"), kernel, filters, stride, pad)?,
            bn: BatchNorm::load(p, &format!("{name}bn"), filters, BN_EPSILON)?,
            se_reduce: Conv2d::load(p, &format!("{name}se_reduce"), 1, filters, filters_se, true, 1, Padding::NONE)?,
            se_expand: Conv2d::load(p, &format!("{name}se_expand"), 1, filters_se, filters, true, 1, Padding::NONE)?,
            project: Conv2d::load(p, &format!("{name}project_conv"), 1, filters, filters_out, false, 1, Padding::NONE)?,
            project_bn: BatchNorm::load(p, &format!("{name}project_bn"), filters_out, BN_EPSILON)?,
            residual: stride == 1 && filters_in == filters_out,
        })
    }

    fn forward(&self, input: &FeatureMap) -> FeatureMap {
        let x = match &self.expand {
            Some((conv, bn)) => swish(bn.forward(conv.forward(input))),
            None => input.clone(),
        };
        let mut x = swish(self.bn.forward(self.dwconv.forward(&x)));

        // squeeze-and-excitation gate
        let squeezed = global_average_pool(&x);
        let squeezed = FeatureMap::from_shape_vec((1, 1, squeezed.len()), squeezed).expect("vector");
        let gate = self.se_expand.forward(&swish(self.se_reduce.forward(&squeezed)));
        let gate: Array1<f32> = gate.iter().map(|&v| sigmoid(v)).collect();
        x *= &gate;

        let x = self.project_bn.forward(self.project.forward(&x));
        if self.residual {
            x + input
        } else {
            x
        }
    }
}

#[derive(Debug, Clone)]
pub struct EfficientNetB0 {
    mean: Array1<f32>,
    std: Array1<f32>,
    rescale: Option<Array1<f32>>,
    stem: Conv2d,
    stem_bn: BatchNorm,
    blocks: Vec<MbConv>,
    top: Conv2d,
    top_bn: BatchNorm,
}

impl EfficientNetB0 {
    pub fn load(p: &mut dyn WeightProvider) -> Result<Self, ModelError> {
        let mean = Array1::from(p.tensor("normalization/mean", &[3])?);
        let var = p.tensor("normalization/variance", &[3])?;
        let std: Array1<f32> = var.iter().map(|&v| v.sqrt().max(NORM_EPSILON)).collect();
        // present in checkpoints converted from the published ImageNet weights
        let rescale = p.optional("input_rescale/scale", &[3])?.map(Array1::from);

        let stem = Conv2d::load(p, "stem_conv", 3, 3, 32, false, 2, Padding::downsample(3, 224, 224))?;
        let stem_bn = BatchNorm::load(p, "stem_bn", 32, BN_EPSILON)?;

        let mut blocks = Vec::new();
        let mut spatial = 112;
        for (i, &(kernel, repeats, fin, fout, expand, stride)) in STAGES.iter().enumerate() {
            for j in 0..repeats {
                let name = format!("block{}{}_", i + 1, (b'a' + j as u8) as char);
                let (fin, stride) = if j == 0 { (fin, stride) } else { (fout, 1) };
                blocks.push(MbConv::load(p, &name, kernel, fin, fout, expand, stride, spatial)?);
                if stride == 2 {
                    spatial /= 2;
                }
            }
        }
        let top = Conv2d::load(p, "top_conv", 1, 320, FEATURE_DIM, false, 1, Padding::NONE)?;
        let top_bn = BatchNorm::load(p, "top_bn", FEATURE_DIM, BN_EPSILON)?;
        Ok(EfficientNetB0 { mean, std, rescale, stem, stem_bn, blocks, top, top_bn })
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        let to_unit = (1.0f64 / 255.0) as f32;
        let mut x = x.mapv(|v| v * to_unit);
        for (c, mut lane) in x.axis_iter_mut(Axis(2)).enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            lane.mapv_inplace(|v| (v - m) / s);
        }
        if let Some(scale) = &self.rescale {
            x *= scale;
        }
        let mut x = swish(self.stem_bn.forward(self.stem.forward(&x)));
        for block in &self.blocks {
            x = block.forward(&x);
        }
        swish(self.top_bn.forward(self.top.forward(&x)))
    }
}

impl VisitParams for EfficientNetB0 {
    fn visit(&self, f: &mut dyn FnMut(&[f32])) {
        f(self.mean.as_slice().expect("contiguous"));
        f(self.std.as_slice().expect("contiguous"));
        if let Some(r) = &self.rescale {
            f(r.as_slice().expect("contiguous"));
        }
        self.stem.visit(f);
        self.stem_bn.visit(f);
        for b in &self.blocks {
            if let Some((c, bn)) = &b.expand {
                c.visit(f);
                bn.visit(f);
            }
            b.dwconv.visit(f);
            b.bn.visit(f);
            b.se_reduce.visit(f);
            b.se_expand.visit(f);
            b.project.visit(f);
            b.project_bn.visit(f);
        }
        self.top.visit(f);
        self.top_bn.visit(f);
    }
}
