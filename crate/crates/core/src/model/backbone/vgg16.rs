//! VGG16 convolutional base: 13 3×3 convolutions in five blocks, each block
//! closed by 2×2 max pooling. 224×224×3 in, 7×7×512 out.

use super::ops::{max_pool, relu, Conv2d, FeatureMap, Padding, VisitParams};
use super::weights::WeightProvider;
use crate::model::ModelError;

const BLOCKS: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)];

pub const FEATURE_DIM: usize = 512;

#[derive(Debug, Clone)]
pub struct Vgg16 {
    blocks: Vec<Vec<Conv2d>>,
}

impl Vgg16 {
    pub fn load(p: &mut dyn WeightProvider) -> Result<Self, ModelError> {
        let mut cin = 3;
        let mut blocks = Vec::with_capacity(BLOCKS.len());
        for (b, &(width, depth)) in BLOCKS.iter().enumerate() {
            let mut convs = Vec::with_capacity(depth);
            for i in 0..depth {
                let name = format!("block{}_conv{}", b + 1, i + 1);
                convs.push(Conv2d::load(p, &name, 3, cin, width, true, 1, Padding::same(3))?);
                cin = width;
            }
            blocks.push(convs);
        }
        Ok(Vgg16 { blocks })
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        let mut x = x.clone();
        for convs in &self.blocks {
            for conv in convs {
                x = relu(conv.forward(&x));
            }
            x = max_pool(&x, 2, 2);
        }
        x
    }
}

impl VisitParams for Vgg16 {
    fn visit(&self, f: &mut dyn FnMut(&[f32])) {
        self.blocks.iter().flatten().for_each(|c| c.visit(f));
    }
}
