use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DamageMask, DataError, SamplePair};
use crate::tensor::Tensor;

/// Basic geometric augmentation toggles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugFlags {
    pub flip: bool,
    /// Right-angle rotations only.
    pub rotate: bool,
}

impl Default for AugFlags {
    fn default() -> Self {
        Self {
            flip: true,
            rotate: true,
        }
    }
}

impl AugFlags {
    pub const NONE: Self = Self {
        flip: false,
        rotate: false,
    };
}

/// One sampled crop + flip + rotation, applied identically to every plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transform {
    pub top: usize,
    pub left: usize,
    pub size: usize,
    pub hflip: bool,
    pub vflip: bool,
    /// Clockwise quarter turns, 0..4.
    pub quarter_turns: u8,
}

impl Transform {
    pub fn sample(
        height: usize,
        width: usize,
        size: usize,
        flags: AugFlags,
        rng: &mut impl Rng,
    ) -> Result<Self, DataError> {
        if size == 0 || size > height || size > width {
            return Err(DataError::CropTooLarge {
                crop: size,
                height,
                width,
            });
        }
        let top = rng.gen_range(0..=height - size);
        let left = rng.gen_range(0..=width - size);
        let hflip = flags.flip && rng.gen_bool(0.5);
        let vflip = flags.flip && rng.gen_bool(0.5);
        let quarter_turns = if flags.rotate {
            rng.gen_range(0..4u8)
        } else {
            0
        };
        Ok(Self {
            top,
            left,
            size,
            hflip,
            vflip,
            quarter_turns,
        })
    }

    pub fn crop_only(top: usize, left: usize, size: usize) -> Self {
        Self {
            top,
            left,
            size,
            hflip: false,
            vflip: false,
            quarter_turns: 0,
        }
    }

    /// Source coordinate (in the full tile) of output pixel `(r, c)`.
    pub fn source(&self, r: usize, c: usize) -> (usize, usize) {
        let last = self.size - 1;
        let (mut r, mut c) = (r, c);
        // Undo clockwise turns: a turn maps (r, c) -> (c, last - r).
        for _ in 0..self.quarter_turns {
            (r, c) = (last - c, r);
        }
        if self.vflip {
            r = last - r;
        }
        if self.hflip {
            c = last - c;
        }
        (self.top + r, self.left + c)
    }

    fn apply_plane<T: Copy>(&self, src: &[T], width: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(self.size * self.size);
        for r in 0..self.size {
            for c in 0..self.size {
                let (sr, sc) = self.source(r, c);
                out.push(src[sr * width + sc]);
            }
        }
        out
    }

    pub fn apply_image(&self, img: &Tensor<f32>) -> Tensor<f32> {
        let (ch, h, w) = img.chw().expect("image is [c, H, W]");
        let plane = h * w;
        let mut data = Vec::with_capacity(ch * self.size * self.size);
        for c in 0..ch {
            data.extend(self.apply_plane(&img.data()[c * plane..(c + 1) * plane], w));
        }
        Tensor::new(vec![ch, self.size, self.size], data).expect("crop shape")
    }

    pub fn apply_mask(&self, mask: &DamageMask) -> DamageMask {
        let data = self.apply_plane(mask.data(), mask.width());
        DamageMask::new(self.size, self.size, data).expect("classes preserved")
    }

    pub fn apply(&self, pair: &SamplePair) -> SamplePair {
        SamplePair {
            id: pair.id.clone(),
            pre: self.apply_image(&pair.pre),
            post: self.apply_image(&pair.post),
            mask: self.apply_mask(&pair.mask),
        }
    }
}

/// Random square crop plus optional flips and quarter turns, one decision for
/// all three planes.
pub fn crop_and_augment(
    pair: &SamplePair,
    crop: usize,
    flags: AugFlags,
    rng: &mut impl Rng,
) -> Result<SamplePair, DataError> {
    let (h, w) = pair.dims();
    let t = Transform::sample(h, w, crop, flags, rng)?;
    Ok(t.apply(pair))
}

/// Crop whose window contains a uniformly chosen pixel of one of `classes`;
/// `None` when the tile has no such pixel.
pub fn crop_containing(
    pair: &SamplePair,
    crop: usize,
    classes: &[u8],
    rng: &mut impl Rng,
) -> Result<Option<SamplePair>, DataError> {
    let (h, w) = pair.dims();
    if crop == 0 || crop > h || crop > w {
        return Err(DataError::CropTooLarge {
            crop,
            height: h,
            width: w,
        });
    }
    let hits: Vec<usize> = pair
        .mask
        .data()
        .iter()
        .enumerate()
        .filter(|(_, v)| classes.contains(v))
        .map(|(i, _)| i)
        .collect();
    if hits.is_empty() {
        return Ok(None);
    }
    let idx = hits[rng.gen_range(0..hits.len())];
    let (r, c) = (idx / w, idx % w);
    let top = rng.gen_range(r.saturating_sub(crop - 1)..=r.min(h - crop));
    let left = rng.gen_range(c.saturating_sub(crop - 1)..=c.min(w - crop));
    Ok(Some(Transform::crop_only(top, left, crop).apply(pair)))
}
