//! Datasets: the synthetic informative-patch task, CIFAR-10 ingestion, the
//! 80/20 split, augmentation and batching.

mod cifar;
mod image;
mod split;
mod synth;

pub use cifar::{cifar10_decode, cifar10_read};
pub use image::{Image, LabeledImage};
pub use split::{augment, batches, batches_on, crop_padded, hflip, split_80_20, AugmentPolicy};
pub use synth::{synth_generate, SynthSpec};

use crate::error::Result;

/// Unlabeled pool, labeled train split and labeled validation split.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    /// Images of `d_tr` with labels dropped.
    pub d_u: Vec<Image>,
    pub d_tr: Vec<LabeledImage>,
    pub d_val: Vec<LabeledImage>,
    pub split_seed: u64,
    /// Ground-truth informative patches, synthetic data only.
    pub informative_set: Option<Vec<usize>>,
}

impl DatasetBundle {
    pub fn from_labeled(items: Vec<LabeledImage>, split_seed: u64) -> Result<Self> {
        let (d_tr, d_val) = split_80_20(items, split_seed)?;
        Ok(DatasetBundle {
            d_u: d_tr.iter().map(|x| x.image.clone()).collect(),
            d_tr,
            d_val,
            split_seed,
            informative_set: None,
        })
    }
}
