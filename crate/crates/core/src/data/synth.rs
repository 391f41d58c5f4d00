//! Deterministic synthetic pre/post tiles.
//!
//! Each tile is a textured ground plane with non-overlapping rectangular
//! buildings. The pre-image shows every building intact; in the post-image each
//! building is redrawn according to its damage level:
//!
//! | class | post-image footprint |
//! |-------|----------------------|
//! | 1 no damage | unchanged |
//! | 2 minor | small brightness shift plus dark speckle |
//! | 3 major | strong color shift plus a debris patch |
//! | 4 destroyed | rubble texture |
//!
//! Images are rendered in 8-bit space so that a PNG round trip is lossless.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::xbd::{write_mask_png, write_rgb_png, Manifest, ManifestEntry};
use super::{DamageMask, DataError, SamplePair, NUM_CLASSES};
use crate::par;
use crate::tensor::Tensor;

/// Building-level damage shares of the xBD annotations (no damage, minor,
/// major, destroyed = 313003, 36860, 29904, 31560 polygons).
pub const XBD_DAMAGE_SHARES: [f64; 4] = [
    313_003.0 / 411_327.0,
    36_860.0 / 411_327.0,
    29_904.0 / 411_327.0,
    31_560.0 / 411_327.0,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_pairs: usize,
    pub image_size: usize,
    pub buildings_min: usize,
    pub buildings_max: usize,
    pub building_side_min: usize,
    pub building_side_max: usize,
    /// Probability of damage classes 1..=4 for each building.
    pub damage_distribution: [f64; 4],
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_pairs: 50,
            image_size: 64,
            buildings_min: 2,
            buildings_max: 6,
            building_side_min: 6,
            building_side_max: 16,
            damage_distribution: XBD_DAMAGE_SHARES,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidConfig(m));
        let total: f64 = self.damage_distribution.iter().sum();
        if self
            .damage_distribution
            .iter()
            .any(|&p| !(0.0..=1.0).contains(&p))
            || (total - 1.0).abs() > 1e-6
        {
            return bad(format!(
                "damage distribution {:?} must be non-negative and sum to 1",
                self.damage_distribution
            ));
        }
        if self.buildings_min == 0 || self.buildings_min > self.buildings_max {
            return bad(format!(
                "buildings range [{}, {}] is empty or zero",
                self.buildings_min, self.buildings_max
            ));
        }
        if self.building_side_min < 2 || self.building_side_min > self.building_side_max {
            return bad(format!(
                "building side range [{}, {}] is invalid",
                self.building_side_min, self.building_side_max
            ));
        }
        let footprint = (self.building_side_max + 1).pow(2) * self.buildings_max;
        if self.image_size < self.building_side_max + 2
            || footprint * 2 > self.image_size * self.image_size
        {
            return bad(format!(
                "image size {} too small for {} buildings of side up to {}",
                self.image_size, self.buildings_max, self.building_side_max
            ));
        }
        Ok(())
    }

    /// Also checks that tiles pass through `depth` 2×2 poolings.
    pub fn validate_for_depth(&self, depth: usize) -> Result<(), DataError> {
        self.validate()?;
        if !self.image_size.is_multiple_of(1 << depth) {
            return Err(DataError::InvalidConfig(format!(
                "image size {} not divisible by 2^{depth}",
                self.image_size
            )));
        }
        Ok(())
    }
}

struct Rgb8 {
    size: usize,
    data: Vec<[u8; 3]>,
}

impl Rgb8 {
    fn to_tensor(&self) -> Tensor<f32> {
        let hw = self.size * self.size;
        let mut out = vec![0.0; 3 * hw];
        for (p, px) in self.data.iter().enumerate() {
            for c in 0..3 {
                out[c * hw + p] = px[c] as f32 / 255.0;
            }
        }
        Tensor::new(vec![3, self.size, self.size], out).unwrap()
    }
}

#[derive(Clone, Copy)]
struct Rect {
    top: usize,
    left: usize,
    h: usize,
    w: usize,
}

impl Rect {
    fn overlaps_with_gap(&self, o: &Rect) -> bool {
        self.top < o.top + o.h + 1
            && o.top < self.top + self.h + 1
            && self.left < o.left + o.w + 1
            && o.left < self.left + self.w + 1
    }

    fn pixels(&self, size: usize) -> impl Iterator<Item = usize> + '_ {
        (self.top..self.top + self.h)
            .flat_map(move |r| (self.left..self.left + self.w).map(move |c| r * size + c))
    }
}

fn clamp_u8(v: i32) -> u8 {
    v.clamp(0, 255) as u8
}

fn jitter(rng: &mut impl Rng, base: [u8; 3], amp: i32) -> [u8; 3] {
    base.map(|v| clamp_u8(v as i32 + rng.gen_range(-amp..=amp)))
}

/// Guarantees a damaged pixel differs from its intact rendering.
fn force_diff(before: [u8; 3], mut after: [u8; 3]) -> [u8; 3] {
    if after == before {
        after[0] = if before[0] > 127 {
            before[0] - 8
        } else {
            before[0] + 8
        };
    }
    after
}

fn draw_class(rng: &mut impl Rng, dist: &[f64; 4]) -> u8 {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as u8 + 1;
        }
    }
    // Rounding slack lands on the last class with nonzero mass.
    dist.iter().rposition(|&p| p > 0.0).unwrap_or(0) as u8 + 1
}

fn render_pair(config: &SynthConfig, index: usize) -> SamplePair {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);
    let n = config.image_size;

    // Ground: base tint, two low-frequency waves, per-pixel grain.
    let base = [
        rng.gen_range(55..95),
        rng.gen_range(75..115),
        rng.gen_range(35..70),
    ];
    let waves: Vec<(f32, f32, f32, f32)> = (0..2)
        .map(|_| {
            (
                rng.gen_range(0.05..0.25),
                rng.gen_range(0.05..0.25),
                rng.gen_range(0.0..std::f32::consts::TAU),
                rng.gen_range(4.0..10.0),
            )
        })
        .collect();
    let mut pre = Rgb8 {
        size: n,
        data: Vec::with_capacity(n * n),
    };
    for r in 0..n {
        for c in 0..n {
            let wave: f32 = waves
                .iter()
                .map(|&(fr, fc, ph, amp)| amp * (fr * r as f32 + fc * c as f32 + ph).sin())
                .sum();
            let grain = rng.gen_range(-6..=6);
            pre.data
                .push(base.map(|v: i32| clamp_u8(v + wave as i32 + grain)));
        }
    }

    // Buildings.
    let count = rng.gen_range(config.buildings_min..=config.buildings_max);
    let mut rects: Vec<Rect> = Vec::with_capacity(count);
    let mut attempts = 0;
    while rects.len() < count && attempts < 200 {
        attempts += 1;
        let h = rng.gen_range(config.building_side_min..=config.building_side_max);
        let w = rng.gen_range(config.building_side_min..=config.building_side_max);
        let rect = Rect {
            top: rng.gen_range(0..=n - h),
            left: rng.gen_range(0..=n - w),
            h,
            w,
        };
        if rects.iter().all(|o| !rect.overlaps_with_gap(o)) {
            rects.push(rect);
        }
    }

    let mut mask = vec![0u8; n * n];
    let mut post = Rgb8 {
        size: n,
        data: Vec::new(),
    };
    let mut classes = Vec::with_capacity(rects.len());
    for rect in &rects {
        let roof = [
            rng.gen_range(135..225),
            rng.gen_range(135..225),
            rng.gen_range(135..225),
        ];
        for p in rect.pixels(n) {
            pre.data[p] = jitter(&mut rng, roof, 4);
        }
        classes.push(draw_class(&mut rng, &config.damage_distribution));
    }
    post.data.clone_from(&pre.data);

    for (rect, &class) in rects.iter().zip(&classes) {
        for p in rect.pixels(n) {
            mask[p] = class;
        }
        match class {
            2 => {
                let mean = pre.data[rect.top * n + rect.left]
                    .iter()
                    .map(|&v| v as i32)
                    .sum::<i32>()
                    / 3;
                let sign = if mean > 170 { -1 } else { 1 };
                let shift = rng.gen_range(18..=28);
                for p in rect.pixels(n) {
                    let speckle = if rng.gen_bool(0.25) {
                        rng.gen_range(35..=60)
                    } else {
                        0
                    };
                    let before = pre.data[p];
                    let after = before.map(|v| clamp_u8(v as i32 + sign * shift - speckle));
                    post.data[p] = force_diff(before, after);
                }
            }
            3 => {
                let tint = [
                    rng.gen_range(100..130),
                    rng.gen_range(70..95),
                    rng.gen_range(40..60),
                ];
                let dh = (rect.h * rng.gen_range(4..=7) / 10).max(1);
                let dw = (rect.w * rng.gen_range(4..=7) / 10).max(1);
                let debris = Rect {
                    top: rect.top + rng.gen_range(0..=rect.h - dh),
                    left: rect.left + rng.gen_range(0..=rect.w - dw),
                    h: dh,
                    w: dw,
                };
                for p in rect.pixels(n) {
                    let before = pre.data[p];
                    let mut after = [0u8; 3];
                    for ch in 0..3 {
                        after[ch] = ((before[ch] as u16 + tint[ch] as u16) / 2) as u8;
                    }
                    post.data[p] = force_diff(before, after);
                }
                for p in debris.pixels(n) {
                    let g = rng.gen_range(45..80);
                    post.data[p] = force_diff(pre.data[p], jitter(&mut rng, [g, g, g], 6));
                }
            }
            4 => {
                for p in rect.pixels(n) {
                    let g = rng.gen_range(70..150);
                    let px = [clamp_u8(g + 15), g as u8, clamp_u8(g - 20)];
                    post.data[p] = force_diff(pre.data[p], px);
                }
            }
            _ => {}
        }
    }

    SamplePair::new(
        format!("synth_{index:05}"),
        pre.to_tensor(),
        post.to_tensor(),
        DamageMask::new(n, n, mask).expect("valid classes"),
    )
    .expect("consistent dimensions")
}

/// Renders the whole dataset without touching the filesystem.
pub fn generate_in_memory(config: &SynthConfig) -> Result<Vec<SamplePair>, DataError> {
    config.validate()?;
    Ok(par::map_indexed(config.num_pairs, |i| {
        render_pair(config, i)
    }))
}

/// Writes `images/`, `targets/` and `manifest.json` under `out_dir`.
pub fn generate_synthetic(config: &SynthConfig, out_dir: &Path) -> Result<Manifest, DataError> {
    let pairs = generate_in_memory(config)?;
    std::fs::create_dir_all(out_dir.join("images"))?;
    std::fs::create_dir_all(out_dir.join("targets"))?;
    let mut entries = Vec::with_capacity(pairs.len());
    for p in &pairs {
        let entry = ManifestEntry::for_id(&p.id, p.mask.class_counts());
        write_rgb_png(&out_dir.join(&entry.pre), &p.pre)?;
        write_rgb_png(&out_dir.join(&entry.post), &p.post)?;
        write_mask_png(&out_dir.join(&entry.mask), &p.mask)?;
        entries.push(entry);
    }
    let manifest = Manifest {
        pairs: entries,
        synth: Some(config.clone()),
    };
    manifest.write(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Share of building pixels per damage class over a set of masks.
pub fn damage_pixel_shares(masks: &[&DamageMask]) -> [f64; 4] {
    let mut counts = [0u64; NUM_CLASSES];
    for m in masks {
        for (c, n) in counts.iter_mut().zip(m.class_counts()) {
            *c += n;
        }
    }
    let total: u64 = counts[1..].iter().sum();
    let mut out = [0.0; 4];
    for k in 0..4 {
        out[k] = counts[k + 1] as f64 / total.max(1) as f64;
    }
    out
}
