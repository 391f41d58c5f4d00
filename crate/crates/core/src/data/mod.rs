//! Paired pre/post samples, damage masks, augmentation, on-disk layout and the
//! synthetic tile generator.

mod augment;
mod synth;
mod xbd;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, IGNORE_INDEX};

pub use augment::{crop_and_augment, crop_containing, AugFlags, Transform};
pub use synth::{
    damage_pixel_shares, generate_in_memory, generate_synthetic, SynthConfig, XBD_DAMAGE_SHARES,
};
pub use xbd::{
    load_xbd_layout, read_mask_png, read_rgb_png, write_mask_png, write_rgb_png, DatasetIndex,
    Manifest, ManifestEntry, PairRef, SkipNotice,
};

/// Number of mask classes: background plus four damage levels.
pub const NUM_CLASSES: usize = 5;

pub const BACKGROUND: u8 = 0;
pub const NO_DAMAGE: u8 = 1;
pub const MINOR_DAMAGE: u8 = 2;
pub const MAJOR_DAMAGE: u8 = 3;
pub const DESTROYED: u8 = 4;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "background",
    "no-damage",
    "minor-damage",
    "major-damage",
    "destroyed",
];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{what}: dimension mismatch {lhs:?} vs {rhs:?}")]
    DimensionMismatch {
        what: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("invalid class id {value} at pixel {pixel}")]
    InvalidClass { value: u8, pixel: usize },
    #[error("crop {crop} larger than tile {height}x{width}")]
    CropTooLarge {
        crop: usize,
        height: usize,
        width: usize,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no complete pre/post pairs found under {0}")]
    EmptyIndex(String),
    #[error("pair {id}: {detail}")]
    BadPair { id: String, detail: String },
    #[error("image {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
}

/// Per-pixel class ids: 0 background, 1 no damage, 2 minor, 3 major,
/// 4 destroyed, or 255 ignore.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DamageMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl DamageMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self, DataError> {
        if data.len() != height * width {
            return Err(DataError::DimensionMismatch {
                what: "mask data",
                lhs: (height, width),
                rhs: (data.len(), 1),
            });
        }
        if let Some((pixel, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, &v)| v as usize >= NUM_CLASSES && v != IGNORE_INDEX)
        {
            return Err(DataError::InvalidClass { value, pixel });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, class: u8) {
        self.data[row * self.width + col] = class;
    }

    /// Pixel count per class id 0..=4 (ignored pixels are not counted).
    pub fn class_counts(&self) -> [u64; NUM_CLASSES] {
        let mut counts = [0u64; NUM_CLASSES];
        for &v in &self.data {
            if (v as usize) < NUM_CLASSES {
                counts[v as usize] += 1;
            }
        }
        counts
    }

    /// Building-vs-background view: every damage level becomes 1.
    pub fn to_building(&self) -> Self {
        let data = self
            .data
            .iter()
            .map(|&v| match v {
                IGNORE_INDEX => IGNORE_INDEX,
                0 => 0,
                _ => 1,
            })
            .collect();
        Self {
            height: self.height,
            width: self.width,
            data,
        }
    }
}

/// Synchronized pre-image, post-image and damage mask of one tile.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub id: String,
    /// `[c, H, W]`, values in `[0, 1]`.
    pub pre: Tensor<f32>,
    /// `[c, H, W]`, values in `[0, 1]`.
    pub post: Tensor<f32>,
    pub mask: DamageMask,
}

impl SamplePair {
    pub fn new(
        id: impl Into<String>,
        pre: Tensor<f32>,
        post: Tensor<f32>,
        mask: DamageMask,
    ) -> Result<Self, DataError> {
        let id = id.into();
        let (pc, ph, pw) = pre.chw().ok_or_else(|| DataError::BadPair {
            id: id.clone(),
            detail: format!("pre-image shape {:?} is not [c, H, W]", pre.shape()),
        })?;
        if post.shape() != pre.shape() {
            return Err(DataError::BadPair {
                id,
                detail: format!(
                    "pre-image {:?} and post-image {:?} differ",
                    pre.shape(),
                    post.shape()
                ),
            });
        }
        if mask.dims() != (ph, pw) {
            return Err(DataError::DimensionMismatch {
                what: "mask vs images",
                lhs: mask.dims(),
                rhs: (ph, pw),
            });
        }
        debug_assert!(pc > 0);
        Ok(Self {
            id,
            pre,
            post,
            mask,
        })
    }

    pub fn channels(&self) -> usize {
        self.pre.shape()[0]
    }

    pub fn dims(&self) -> (usize, usize) {
        self.mask.dims()
    }

    pub fn has_any_class(&self, classes: &[u8]) -> bool {
        self.mask.data().iter().any(|v| classes.contains(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_rejects_unknown_class() {
        assert!(matches!(
            DamageMask::new(1, 2, vec![1, 7]),
            Err(DataError::InvalidClass { value: 7, pixel: 1 })
        ));
        assert!(DamageMask::new(1, 2, vec![4, 255]).is_ok());
    }

    #[test]
    fn building_view_collapses_damage() {
        let m = DamageMask::new(1, 5, vec![0, 1, 2, 3, 255]).unwrap();
        assert_eq!(m.to_building().data(), &[0, 1, 1, 1, 255]);
        assert_eq!(m.class_counts(), [1, 1, 1, 1, 0]);
    }

    #[test]
    fn sample_pair_checks_dimensions() {
        let img = Tensor::zeros(&[3, 4, 4]);
        let ok = SamplePair::new("a", img.clone(), img.clone(), DamageMask::filled(4, 4, 0));
        assert!(ok.is_ok());
        let bad = SamplePair::new("b", img.clone(), img, DamageMask::filled(4, 5, 0));
        assert!(matches!(bad, Err(DataError::DimensionMismatch { .. })));
    }
}
