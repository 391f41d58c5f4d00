//! Hard-class CutMix for paired change-detection samples.
//!
//! A square box is cut around a hard-class pixel of a donor tile and pasted at
//! the same coordinates into a recipient. One binary mask `M` governs the
//! pre-image, post-image and label:
//!
//! ```text
//! out = M ⊙ recipient + (1 − M) ⊙ donor
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{crop_containing, DamageMask, DataError, SamplePair, NUM_CLASSES};
use crate::par;
use crate::tensor::Tensor;

const MAX_BOX_ATTEMPTS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CutMixPolicy {
    pub target_classes: Vec<u8>,
    /// Chance that a training sample is mixed.
    pub probability: f64,
    /// Box side as a fraction of `min(H, W)`, sampled uniformly.
    pub box_fraction_range: [f64; 2],
    /// Minimum share of target-class pixels inside the donor box.
    pub min_hard_fraction: f64,
    pub seed: u64,
}

impl Default for CutMixPolicy {
    fn default() -> Self {
        Self {
            target_classes: vec![2, 3],
            probability: 0.5,
            box_fraction_range: [0.2, 0.5],
            min_hard_fraction: 0.01,
            seed: 0,
        }
    }
}

impl CutMixPolicy {
    pub fn new(
        target_classes: &[u8],
        probability: f64,
        box_fraction_range: [f64; 2],
        min_hard_fraction: f64,
        seed: u64,
    ) -> Result<Self, DataError> {
        let policy = Self {
            target_classes: target_classes.to_vec(),
            probability,
            box_fraction_range,
            min_hard_fraction,
            seed,
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidConfig(m));
        if self.target_classes.is_empty() {
            return bad("cutmix target_classes is empty".into());
        }
        if let Some(c) = self
            .target_classes
            .iter()
            .find(|&&c| c == 0 || c as usize >= NUM_CLASSES)
        {
            return bad(format!(
                "cutmix target class {c} is not a damage class 1..=4"
            ));
        }
        if !(0.0..=1.0).contains(&self.probability) {
            return bad(format!(
                "cutmix probability {} outside [0, 1]",
                self.probability
            ));
        }
        let [lo, hi] = self.box_fraction_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return bad(format!("cutmix box_fraction_range [{lo}, {hi}] invalid"));
        }
        if !(0.0..=1.0).contains(&self.min_hard_fraction) {
            return bad(format!(
                "cutmix min_hard_fraction {} outside [0, 1]",
                self.min_hard_fraction
            ));
        }
        Ok(())
    }

    fn is_target(&self, class: u8) -> bool {
        self.target_classes.contains(&class)
    }
}

/// `1` keeps the recipient pixel, `0` takes the donor pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    /// Ones everywhere except a `size × size` box of zeros at `(top, left)`.
    pub fn with_box(height: usize, width: usize, top: usize, left: usize, size: usize) -> Self {
        assert!(
            top + size <= height && left + size <= width,
            "box out of bounds"
        );
        let mut m = Self::ones(height, width);
        for r in top..top + size {
            m.data[r * width + left..r * width + left + size].fill(0);
        }
        m
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

    pub fn zero_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 0).count()
    }

    /// Bounding box `(top, left, height, width)` of the zero region.
    pub fn zero_bounds(&self) -> Option<(usize, usize, usize, usize)> {
        bounding_box(self.height, self.width, |i| self.data[i] == 0)
    }
}

/// Bounding box `(top, left, height, width)` of the pixels selected by `hit`.
pub fn bounding_box(
    height: usize,
    width: usize,
    hit: impl Fn(usize) -> bool,
) -> Option<(usize, usize, usize, usize)> {
    let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
    for r in 0..height {
        for c in 0..width {
            if hit(r * width + c) {
                r0 = r0.min(r);
                c0 = c0.min(c);
                r1 = r1.max(r);
                c1 = c1.max(c);
            }
        }
    }
    (r0 != usize::MAX).then(|| (r0, c0, r1 - r0 + 1, c1 - c0 + 1))
}

/// Box around a random target-class pixel of `donor_mask`.
///
/// The box side is `U(lo, hi) · min(H, W)`, rounded, at least one pixel. A box
/// that would cross the border is shifted inward so it keeps its full size and
/// still contains the chosen pixel. Returns `None` when the donor has no
/// target-class pixel or ten attempts miss `min_hard_fraction`.
pub fn sample_box(
    donor_mask: &DamageMask,
    policy: &CutMixPolicy,
    rng: &mut impl Rng,
) -> Option<BinaryMask> {
    let (h, w) = donor_mask.dims();
    let hits: Vec<usize> = donor_mask
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| policy.is_target(v))
        .map(|(i, _)| i)
        .collect();
    if hits.is_empty() {
        return None;
    }
    let short = h.min(w);
    let [lo, hi] = policy.box_fraction_range;
    for _ in 0..MAX_BOX_ATTEMPTS {
        let centre = hits[rng.gen_range(0..hits.len())];
        let frac = lo + (hi - lo) * rng.gen::<f64>();
        let side = ((frac * short as f64).round() as usize).clamp(1, short);
        let (r, c) = (centre / w, centre % w);
        let top = r.saturating_sub(side / 2).min(h - side);
        let left = c.saturating_sub(side / 2).min(w - side);
        let mut hard = 0usize;
        for rr in top..top + side {
            for cc in left..left + side {
                hard += policy.is_target(donor_mask.get(rr, cc)) as usize;
            }
        }
        if hard as f64 >= policy.min_hard_fraction * (side * side) as f64 {
            return Some(BinaryMask::with_box(h, w, top, left, side));
        }
    }
    None
}

fn mix_image(a: &Tensor<f32>, b: &Tensor<f32>, m: &BinaryMask) -> Tensor<f32> {
    let hw = m.data.len();
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .enumerate()
        .map(|(i, (&x, &y))| if m.data[i % hw] == 1 { x } else { y })
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Pixelwise `M ⊙ a + (1 − M) ⊙ b` on all three planes.
pub fn apply_cutmix(
    a: &SamplePair,
    b: &SamplePair,
    m: &BinaryMask,
) -> Result<SamplePair, DataError> {
    if a.dims() != b.dims() || a.dims() != m.dims() {
        return Err(DataError::DimensionMismatch {
            what: "cutmix samples and mask",
            lhs: a.dims(),
            rhs: if a.dims() != b.dims() {
                b.dims()
            } else {
                m.dims()
            },
        });
    }
    if a.channels() != b.channels() {
        return Err(DataError::BadPair {
            id: b.id.clone(),
            detail: format!("{} channels, recipient has {}", b.channels(), a.channels()),
        });
    }
    let labels = a
        .mask
        .data()
        .iter()
        .zip(b.mask.data())
        .zip(&m.data)
        .map(|((&x, &y), &keep)| if keep == 1 { x } else { y })
        .collect();
    let (h, w) = a.dims();
    Ok(SamplePair {
        id: format!("{}+{}", a.id, b.id),
        pre: mix_image(&a.pre, &b.pre, m),
        post: mix_image(&a.post, &b.post, m),
        mask: DamageMask::new(h, w, labels)?,
    })
}

/// Indices of samples carrying at least one target-class pixel.
pub fn donor_indices(samples: &[SamplePair], policy: &CutMixPolicy) -> Vec<usize> {
    samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.has_any_class(&policy.target_classes))
        .map(|(i, _)| i)
        .collect()
}

/// Outcome of one batch element.
#[derive(Debug, Clone, PartialEq)]
pub struct MixOutcome {
    pub sample: SamplePair,
    /// Donor index into the pool and the mask used, when mixed.
    pub mix: Option<(usize, BinaryMask)>,
}

/// RNG for batch element `index`, independent of evaluation order.
pub fn sample_rng(batch_seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
    rng.set_stream(index as u64);
    rng
}

fn mix_one(
    sample: &SamplePair,
    donor_pool: &[SamplePair],
    policy: &CutMixPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<MixOutcome, DataError> {
    let pass = || MixOutcome {
        sample: sample.clone(),
        mix: None,
    };
    if !rng.gen_bool(policy.probability) {
        return Ok(pass());
    }
    let d = rng.gen_range(0..donor_pool.len());
    let donor = &donor_pool[d];
    let (h, w) = sample.dims();
    let cropped;
    let donor = if donor.dims() == (h, w) {
        donor
    } else {
        let (dh, dw) = donor.dims();
        if h != w || h > dh || w > dw {
            log::debug!("donor {} ({dh}x{dw}) cannot cover {h}x{w}", donor.id);
            return Ok(pass());
        }
        match crop_containing(donor, h, &policy.target_classes, rng)? {
            Some(c) => {
                cropped = c;
                &cropped
            }
            None => return Ok(pass()),
        }
    };
    match sample_box(&donor.mask, policy, rng) {
        Some(m) => Ok(MixOutcome {
            sample: apply_cutmix(sample, donor, &m)?,
            mix: Some((d, m)),
        }),
        None => Ok(pass()),
    }
}

/// Mixes each element with probability `policy.probability` using a donor drawn
/// uniformly from `donor_pool`. Donors larger than the batch tiles are cropped
/// around a target-class pixel first. Element `i` draws from
/// [`sample_rng`]`(batch_seed, i)`.
pub fn augment_batch_detailed(
    batch: &[SamplePair],
    donor_pool: &[SamplePair],
    policy: &CutMixPolicy,
    batch_seed: u64,
) -> Result<Vec<MixOutcome>, DataError> {
    if donor_pool.is_empty() {
        log::info!("cutmix donor pool is empty; batch passes through");
        return Ok(batch
            .iter()
            .map(|s| MixOutcome {
                sample: s.clone(),
                mix: None,
            })
            .collect());
    }
    par::try_map_indexed(batch.len(), |i| {
        let mut rng = sample_rng(batch_seed, i);
        mix_one(&batch[i], donor_pool, policy, &mut rng)
    })
}

pub fn augment_batch(
    batch: &[SamplePair],
    donor_pool: &[SamplePair],
    policy: &CutMixPolicy,
    batch_seed: u64,
) -> Result<Vec<SamplePair>, DataError> {
    Ok(
        augment_batch_detailed(batch, donor_pool, policy, batch_seed)?
            .into_iter()
            .map(|o| o.sample)
            .collect(),
    )
}
