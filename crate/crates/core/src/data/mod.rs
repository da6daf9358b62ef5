//! Synthetic annotated nuclei images, ground-truth masks, augmentation,
//! patch extraction, and the on-disk dataset format.

mod augment;
mod io;
mod masks;
mod synth;

pub use augment::{apply_transforms, augment, draw_transforms, AugmentConfig, Transform};
pub use io::{split_ids, Dataset, ImageRecord, Manifest, Split, MANIFEST_VERSION};
pub(crate) use io::read_png;
pub use masks::{crop_patches, make_masks, MaskPair, Patch};
pub use synth::{generate, generate_one, CategoryStyle, SynthConfig};

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Category names in label order (label 0 is background).
pub const CATEGORY_NAMES: [&str; 4] = ["epithelial", "fibroblast", "inflammatory", "miscellaneous"];

/// An annotated nucleus centroid. Categories run from 1 to K.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Nucleus {
    pub row: usize,
    pub col: usize,
    pub category: u8,
}

/// An RGB image `[3,H,W]` with values in `[0,1]` and its centroid annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub id: String,
    pub pixels: Tensor,
    pub nuclei: Vec<Nucleus>,
}

impl AnnotatedImage {
    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}
