use super::{Model, PipelineError, Result};
use crate::data::DamageMask;
use crate::par;
use crate::tensor::Tensor;

/// Window origins covering `len` with windows of `crop` that overlap by at
/// least `overlap`. The last window is aligned to the end.
pub fn tile_starts(len: usize, crop: usize, overlap: usize) -> Vec<usize> {
    if len <= crop {
        return vec![0];
    }
    let step = crop - overlap;
    let mut v: Vec<usize> = (0..)
        .map(|i| i * step)
        .take_while(|&s| s + crop < len)
        .collect();
    v.push(len - crop);
    v.dedup();
    v
}

fn window(img: &Tensor, top: usize, left: usize, size: usize) -> Tensor {
    let (c, h, w) = img.chw().expect("chw");
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for r in top..top + size {
            let row = ch * h * w + r * w;
            out.extend_from_slice(&img.data()[row + left..row + left + size]);
        }
    }
    Tensor::new(vec![c, size, size], out).expect("window shape")
}

fn pad_to(img: &Tensor, height: usize, width: usize) -> Tensor {
    let (c, h, w) = img.chw().expect("chw");
    if (h, w) == (height, width) {
        return img.clone();
    }
    let mut out = Tensor::zeros(&[c, height, width]);
    for ch in 0..c {
        for r in 0..h {
            let src = &img.data()[ch * h * w + r * w..ch * h * w + (r + 1) * w];
            let dst = ch * height * width + r * width;
            out.data_mut()[dst..dst + w].copy_from_slice(src);
        }
    }
    out
}

/// Sliding-window prediction.
///
/// The (zero-padded, if smaller than `crop`) input is covered by `crop × crop`
/// windows overlapping by `overlap`; logits are averaged where windows overlap
/// and the arg-max class is returned. Stage-1 models yield `{0, 1}`, stage-2
/// models `{0..=4}`.
pub fn predict(
    model: &Model,
    pre: &Tensor,
    post: Option<&Tensor>,
    crop: usize,
    overlap: usize,
) -> Result<DamageMask> {
    model.config.check_size(crop, crop)?;
    if overlap >= crop {
        return Err(PipelineError::Config(format!(
            "overlap {overlap} must be smaller than crop {crop}"
        )));
    }
    let (c, h, w) = pre
        .chw()
        .ok_or_else(|| PipelineError::Config(format!("image shape {:?}", pre.shape())))?;
    if c != model.config.in_channels {
        return Err(PipelineError::Channels {
            expected: model.config.in_channels,
            found: c,
        });
    }
    if let Some(p) = post {
        if p.shape() != pre.shape() {
            return Err(PipelineError::Config(format!(
                "pre {:?} and post {:?} differ",
                pre.shape(),
                p.shape()
            )));
        }
    }
    let (ph, pw) = (h.max(crop), w.max(crop));
    let pre = pad_to(pre, ph, pw);
    let post = post.map(|p| pad_to(p, ph, pw));

    let origins: Vec<(usize, usize)> = tile_starts(ph, crop, overlap)
        .into_iter()
        .flat_map(|r| {
            tile_starts(pw, crop, overlap)
                .into_iter()
                .map(move |c| (r, c))
        })
        .collect();
    let tiles = par::try_map_indexed(origins.len(), |i| {
        let (r, c) = origins[i];
        let a = window(&pre, r, c, crop);
        let b = post.as_ref().map(|p| window(p, r, c, crop));
        model.logits(&a, b.as_ref())
    })?;

    let k = model.stage.num_classes();
    let mut sum = vec![0.0f32; k * ph * pw];
    let mut count = vec![0u32; ph * pw];
    for (&(top, left), logits) in origins.iter().zip(&tiles) {
        let d = logits.data();
        for r in 0..crop {
            for cc in 0..crop {
                let p = (top + r) * pw + left + cc;
                count[p] += 1;
                for class in 0..k {
                    sum[class * ph * pw + p] += d[class * crop * crop + r * crop + cc];
                }
            }
        }
    }

    let mut labels = Vec::with_capacity(h * w);
    for r in 0..h {
        for cc in 0..w {
            let p = r * pw + cc;
            let n = count[p] as f32;
            let mut best = 0;
            let mut best_v = f32::NEG_INFINITY;
            for class in 0..k {
                let v = sum[class * ph * pw + p] / n;
                if v > best_v {
                    best = class;
                    best_v = v;
                }
            }
            labels.push(best as u8);
        }
    }
    Ok(DamageMask::new(h, w, labels)?)
}
