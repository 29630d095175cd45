//! ResNet50V2: pre-activation bottleneck residual network.
//!
//! Stem 7×7/2 convolution and 3×3/2 max pooling, then four stacks of
//! bottleneck blocks (3, 4, 6, 3) whose last block carries the stride, and a
//! final batch-norm + ReLU. 224×224×3 in, 7×7×2048 out.

use ndarray::s;

use super::ops::{max_pool, relu, zero_pad, BatchNorm, Conv2d, FeatureMap, Padding, VisitParams};
use super::weights::WeightProvider;
use crate::model::ModelError;

const BN_EPSILON: f32 = 1.001e-5;
const STACKS: [(usize, usize, usize); 4] = [(64, 3, 2), (128, 4, 2), (256, 6, 2), (512, 3, 1)];

pub const FEATURE_DIM: usize = 2048;

#[derive(Debug, Clone)]
struct Block {
    preact_bn: BatchNorm,
    shortcut: Option<Conv2d>,
    stride: usize,
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    conv3: Conv2d,
}

impl Block {
    fn load(
        p: &mut dyn WeightProvider,
        name: &str,
        cin: usize,
        filters: usize,
        stride: usize,
        conv_shortcut: bool,
    ) -> Result<Self, ModelError> {
        let out = 4 * filters;
        Ok(Block {
            preact_bn: BatchNorm::load(p, &format!("{name}_preact_bn"), cin, BN_EPSILON)?,
            shortcut: if conv_shortcut {
                Some(Conv2d::load(p, &format!("{name}_0_conv"), 1, cin, out, true, stride, Padding::NONE)?)
            } else {
                None
            },
            stride,
            conv1: Conv2d::load(p, &format!("{name}_1_conv"), 1, cin, filters, false, 1, Padding::NONE)?,
            bn1: BatchNorm::load(p, &format!("{name}_1_bn"), filters, BN_EPSILON)?,
            conv2: Conv2d::load(p, &format!("{name}_2_conv"), 3, filters, filters, false, stride, Padding::uniform(1))?,
            bn2: BatchNorm::load(p, &format!("{name}_2_bn"), filters, BN_EPSILON)?,
            conv3: Conv2d::load(p, &format!("{name}_3_conv"), 1, filters, out, true, 1, Padding::NONE)?,
        })
    }

    fn forward(&self, x: &FeatureMap) -> FeatureMap {
        let preact = relu(self.preact_bn.forward(x.clone()));
        let shortcut = match &self.shortcut {
            Some(conv) => conv.forward(&preact),
            None if self.stride > 1 => x.slice(s![..;self.stride, ..;self.stride, ..]).to_owned(),
            None => x.clone(),
        };
        let y = relu(self.bn1.forward(self.conv1.forward(&preact)));
        let y = relu(self.bn2.forward(self.conv2.forward(&y)));
        self.conv3.forward(&y) + shortcut
    }
}

#[derive(Debug, Clone)]
pub struct ResNet50V2 {
    stem: Conv2d,
    blocks: Vec<Block>,
    post_bn: BatchNorm,
}

impl ResNet50V2 {
    pub fn load(p: &mut dyn WeightProvider) -> Result<Self, ModelError> {
        let stem = Conv2d::load(p, "conv1_conv", 7, 3, 64, true, 2, Padding::uniform(3))?;
        let mut blocks = Vec::new();
        let mut cin = 64;
        for (s, &(filters, depth, last_stride)) in STACKS.iter().enumerate() {
            for b in 1..=depth {
                let name = format!("conv{}_block{}", s + 2, b);
                let stride = if b == depth { last_stride } else { 1 };
                blocks.push(Block::load(p, &name, cin, filters, stride, b == 1)?);
                cin = 4 * filters;
            }
        }
        let post_bn = BatchNorm::load(p, "post_bn", cin, BN_EPSILON)?;
        Ok(ResNet50V2 { stem, blocks, post_bn })
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        let x = self.stem.forward(x);
        let mut x = max_pool(&zero_pad(&x, Padding::uniform(1)), 3, 2);
        for block in &self.blocks {
            x = block.forward(&x);
        }
        relu(self.post_bn.forward(x))
    }
}

impl VisitParams for ResNet50V2 {
    fn visit(&self, f: &mut dyn FnMut(&[f32])) {
        self.stem.visit(f);
        for b in &self.blocks {
            b.preact_bn.visit(f);
            if let Some(s) = &b.shortcut {
                s.visit(f);
            }
            b.conv1.visit(f);
            b.bn1.visit(f);
            b.conv2.visit(f);
            b.bn2.visit(f);
            b.conv3.visit(f);
        }
        self.post_bn.visit(f);
    }
}
