//! Tile-level xBD directory layout.
//!
//! ```text
//! root/images/<id>_pre_disaster.png
//! root/images/<id>_post_disaster.png
//! root/targets/<id>_post_disaster_target.png   (8-bit class ids 0..=4)
//! root/manifest.json                            (optional)
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader, RgbImage};
use serde::{Deserialize, Serialize};

use super::synth::SynthConfig;
use super::{DamageMask, DataError, SamplePair, NUM_CLASSES};
use crate::par;
use crate::tensor::Tensor;

const PRE_SUFFIX: &str = "_pre_disaster.png";
const POST_SUFFIX: &str = "_post_disaster.png";
const TARGET_SUFFIX: &str = "_post_disaster_target.png";

fn image_err(path: &Path, source: image::ImageError) -> DataError {
    DataError::Image {
        path: path.display().to_string(),
        source,
    }
}

pub fn read_rgb_png(path: &Path) -> Result<Tensor<f32>, DataError> {
    let img = ImageReader::open(path)?
        .decode()
        .map_err(|e| image_err(path, e))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let hw = h * w;
    let mut data = vec![0.0; 3 * hw];
    for (p, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * hw + p] = px.0[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::new(vec![3, h, w], data).expect("rgb shape"))
}

/// Writes the first three channels of a `[c, H, W]` image in `[0, 1]`.
pub fn write_rgb_png(path: &Path, img: &Tensor<f32>) -> Result<(), DataError> {
    let (c, h, w) = img.chw().ok_or_else(|| DataError::BadPair {
        id: path.display().to_string(),
        detail: format!("cannot write shape {:?} as RGB", img.shape()),
    })?;
    let hw = h * w;
    let d = img.data();
    let out = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        image::Rgb(std::array::from_fn(|ch| {
            let v = d[ch.min(c - 1) * hw + p];
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    });
    out.save(path).map_err(|e| image_err(path, e))
}

pub fn read_mask_png(path: &Path) -> Result<DamageMask, DataError> {
    let img = ImageReader::open(path)?
        .decode()
        .map_err(|e| image_err(path, e))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    DamageMask::new(h, w, img.into_raw())
}

pub fn write_mask_png(path: &Path, mask: &DamageMask) -> Result<(), DataError> {
    let img = GrayImage::from_raw(
        mask.width() as u32,
        mask.height() as u32,
        mask.data().to_vec(),
    )
    .expect("mask buffer size");
    img.save(path).map_err(|e| image_err(path, e))
}

/// Lazily loadable pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairRef {
    pub id: String,
    pub pre_path: PathBuf,
    pub post_path: PathBuf,
    pub mask_path: PathBuf,
    pub dims: (usize, usize),
}

impl PairRef {
    pub fn load(&self) -> Result<SamplePair, DataError> {
        let pre = read_rgb_png(&self.pre_path)?;
        let post = read_rgb_png(&self.post_path)?;
        let mask = read_mask_png(&self.mask_path)?;
        SamplePair::new(self.id.clone(), pre, post, mask)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkipNotice {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub root: PathBuf,
    /// Sorted by id.
    pub pairs: Vec<PairRef>,
    pub skipped: Vec<SkipNotice>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn load_all(&self) -> Result<Vec<SamplePair>, DataError> {
        par::try_map_indexed(self.pairs.len(), |i| self.pairs[i].load())
    }
}

#[derive(Default)]
struct Halves {
    pre: Option<PathBuf>,
    post: Option<PathBuf>,
}

fn dims_of(path: &Path) -> Result<(usize, usize), DataError> {
    let (w, h) = image::image_dimensions(path).map_err(|e| image_err(path, e))?;
    Ok((h as usize, w as usize))
}

/// Indexes `root` without decoding pixel data. Incomplete or inconsistent pairs
/// are skipped and reported in [`DatasetIndex::skipped`].
pub fn load_xbd_layout(root: &Path) -> Result<DatasetIndex, DataError> {
    let images = root.join("images");
    let mut halves: BTreeMap<String, Halves> = BTreeMap::new();
    if images.is_dir() {
        for entry in std::fs::read_dir(&images)? {
            let path = entry?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            if let Some(id) = name.strip_suffix(PRE_SUFFIX) {
                halves.entry(id.to_string()).or_default().pre = Some(path.clone());
            } else if let Some(id) = name.strip_suffix(POST_SUFFIX) {
                halves.entry(id.to_string()).or_default().post = Some(path.clone());
            }
        }
    }

    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for (id, h) in halves {
        let mask_path = root.join("targets").join(format!("{id}{TARGET_SUFFIX}"));
        let (pre_path, post_path) = match (h.pre, h.post) {
            (Some(a), Some(b)) if mask_path.is_file() => (a, b),
            (pre, post) => {
                let missing: Vec<&str> = [
                    (pre.is_none(), "pre-image"),
                    (post.is_none(), "post-image"),
                    (!mask_path.is_file(), "target mask"),
                ]
                .iter()
                .filter(|(m, _)| *m)
                .map(|(_, n)| *n)
                .collect();
                let reason = format!("missing {}", missing.join(", "));
                log::warn!("skipping pair {id}: {reason}");
                skipped.push(SkipNotice { id, reason });
                continue;
            }
        };
        let dims = [
            dims_of(&pre_path)?,
            dims_of(&post_path)?,
            dims_of(&mask_path)?,
        ];
        if dims[0] != dims[1] || dims[0] != dims[2] {
            let reason = format!(
                "size mismatch: pre {:?}, post {:?}, mask {:?}",
                dims[0], dims[1], dims[2]
            );
            log::warn!("rejecting pair {id}: {reason}");
            skipped.push(SkipNotice { id, reason });
            continue;
        }
        pairs.push(PairRef {
            id,
            pre_path,
            post_path,
            mask_path,
            dims: dims[0],
        });
    }
    if pairs.is_empty() {
        return Err(DataError::EmptyIndex(root.display().to_string()));
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        pairs,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub pre: String,
    pub post: String,
    pub mask: String,
    pub class_counts: [u64; NUM_CLASSES],
}

impl ManifestEntry {
    pub fn for_id(id: &str, class_counts: [u64; NUM_CLASSES]) -> Self {
        Self {
            id: id.to_string(),
            pre: format!("images/{id}{PRE_SUFFIX}"),
            post: format!("images/{id}{POST_SUFFIX}"),
            mask: format!("targets/{id}{TARGET_SUFFIX}"),
            class_counts,
        }
    }
}

/// Pair listing with per-class pixel counts; doubles as the CutMix donor index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub pairs: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, DataError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Ids of pairs with at least one pixel of any of `classes`.
    pub fn donor_ids(&self, classes: &[u8]) -> Vec<&str> {
        self.pairs
            .iter()
            .filter(|e| classes.iter().any(|&c| e.class_counts[c as usize] > 0))
            .map(|e| e.id.as_str())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;

    #[test]
    fn orphans_are_skipped_and_order_is_lexicographic() {
        let dir = tempfile::tempdir().unwrap();
        let config = SynthConfig {
            num_pairs: 3,
            seed: 1,
            ..SynthConfig::default()
        };
        generate_synthetic(&config, dir.path()).unwrap();
        let orphan = dir.path().join("images/aaa_orphan_pre_disaster.png");
        std::fs::copy(
            dir.path().join("images/synth_00000_pre_disaster.png"),
            &orphan,
        )
        .unwrap();
        let index = load_xbd_layout(dir.path()).unwrap();
        assert_eq!(index.len(), 3);
        assert_eq!(index.skipped.len(), 1);
        assert_eq!(index.skipped[0].id, "aaa_orphan");
        let ids: Vec<_> = index.pairs.iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids, ["synth_00000", "synth_00001", "synth_00002"]);
    }

    #[test]
    fn size_mismatch_rejects_only_that_pair() {
        let dir = tempfile::tempdir().unwrap();
        let config = SynthConfig {
            num_pairs: 2,
            ..SynthConfig::default()
        };
        generate_synthetic(&config, dir.path()).unwrap();
        let small = Tensor::zeros(&[3, 8, 8]);
        write_rgb_png(
            &dir.path().join("images/synth_00001_post_disaster.png"),
            &small,
        )
        .unwrap();
        let index = load_xbd_layout(dir.path()).unwrap();
        assert_eq!(index.len(), 1);
        assert!(index.skipped[0].reason.contains("size mismatch"));
    }

    #[test]
    fn empty_directory_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_xbd_layout(dir.path()),
            Err(DataError::EmptyIndex(_))
        ));
    }
}
