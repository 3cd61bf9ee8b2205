//! Dataset ingestion, training-target derivation and synthetic data.
//!
//! On-disk layout follows Warwick-QU: `<root>/<id>.<ext>` holds the RGB
//! image and `<root>/<id>_anno.<ext>` the grayscale instance annotation,
//! where the pixel value is the instance label. Ids starting with `train_`
//! go to the training split, `testA_` / `testB_` to the test split, unless
//! a split manifest is given.

mod io;
mod synthetic;
mod targets;

pub use io::{
    load_dataset, read_label_map, read_rgb, save_dataset, save_sample, write_gray_png, write_label_png, write_rgb_png,
    SplitSpec,
};
pub use synthetic::{generate_synthetic, generate_synthetic_split, synthetic_sample};
pub use targets::{derive_targets, DEFAULT_BAND_WIDTH};

use crate::raster::{LabelMap, Mask, RgbRaster};

/// An RGB histology image with its instance-labelled ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub image: RgbRaster,
    pub instance_mask: LabelMap,
}

impl ImageSample {
    pub fn instance_count(&self) -> u32 {
        self.instance_mask.as_slice().iter().copied().max().unwrap_or(0)
    }
}

/// The two binary training targets derived from an instance mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetPair {
    pub gland: Mask,
    pub contour: Mask,
    pub band_width: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Renumber labels to {0} ∪ {1..K}, preserving the order of the original values.
pub fn renumber_labels(mask: &mut LabelMap) {
    let mut present: Vec<u32> = mask.as_slice().iter().copied().filter(|&l| l != 0).collect();
    present.sort_unstable();
    present.dedup();
    if present.iter().enumerate().all(|(i, &l)| l == i as u32 + 1) {
        return;
    }
    for v in mask.as_mut_slice() {
        if *v != 0 {
            *v = present.binary_search(v).expect("label collected above") as u32 + 1;
        }
    }
}
