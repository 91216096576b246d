//! Image/mask pairs: loading, partitioning and geometric augmentation.

mod augment;
mod loader;
mod split;
mod synthetic;

pub use augment::{
    augment, center_crop, flip, grid_distortion, rotate, sample_rng, AugmentOp, AugmentSpec,
    FlipAxis,
};
pub use loader::{list_pairs, load_dataset, load_image, normalize, DatasetLayout};
pub use split::{select, split_dataset, split_ids, DatasetSplit, SplitName, SplitRatios};
pub use synthetic::synthetic_circles;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An image (3×H×W, values in [0,1]) and its binary mask (1×H×W).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: Tensor<f32>) -> Result<Self> {
        let id = id.into();
        let (is, ms) = (image.shape(), mask.shape());
        if is.len() != 3 || ms.len() != 3 || ms[0] != 1 {
            return Err(Error::shape(
                "sample",
                "rank",
                format!("{id}: expected C×H×W image and 1×H×W mask, got {is:?} and {ms:?}"),
            ));
        }
        if is[1..] != ms[1..] {
            return Err(Error::shape(
                "sample",
                "spatial",
                format!("{id}: image {is:?} and mask {ms:?} differ"),
            ));
        }
        if !mask_is_binary(&mask) {
            return Err(Error::Dataset(format!("{id}: mask is not binary")));
        }
        Ok(Self { id, image, mask })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }
}

pub fn mask_is_binary(mask: &Tensor<f32>) -> bool {
    mask.data().iter().all(|&v| v == 0.0 || v == 1.0)
}

/// Stacks samples into an N×C×H×W image batch and an N×1×H×W mask batch.
pub fn collate(samples: &[&Sample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let images: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.image).collect();
    let masks: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.mask).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
}
