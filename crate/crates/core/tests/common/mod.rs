//! Test oracles shared by integration and acceptance tests.
#![allow(dead_code)]

use damage_core::fusion::FusionParams;
use damage_core::tensor::{Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Forward = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>;

/// Coarse central-difference step; the estimate extrapolates from `h` and `h/2`.
pub const FD_STEP: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|)`, with a floor that keeps exact zeros from
/// dividing rounding noise by zero.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / scale
}

fn loss_of(inputs: &[Tensor<f64>], f: &Forward) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars).expect("forward");
    tape.value(out).item().expect("scalar loss")
}

/// Largest relative error between reverse-mode gradients of `f` and central
/// finite differences, over every element of every input.
///
/// The numeric derivative is Richardson-extrapolated, `(4·D(h/2) − D(h)) / 3`
/// with `D` the central difference. Its truncation error is O(h⁴) and its
/// rounding error about `ε·|f| / h`, so gradients near 1e-6 are still resolved.
/// Inputs must keep kinks (ReLU, max-pool ties) farther than `h` away.
pub fn gradcheck(inputs: &[Tensor<f64>], f: &Forward) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars).expect("forward");
    let grads = tape.backward(out).expect("backward");

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let g = grads.get(*v).expect("leaf gradient");
        for i in 0..inputs[k].len() {
            let x = inputs[k].data()[i];
            let mut central = |h: f64| {
                probe[k].data_mut()[i] = x + h;
                let up = loss_of(&probe, f);
                probe[k].data_mut()[i] = x - h;
                let down = loss_of(&probe, f);
                probe[k].data_mut()[i] = x;
                (up - down) / (2.0 * h)
            };
            let coarse = central(FD_STEP);
            let numeric = (4.0 * central(FD_STEP / 2.0) - coarse) / 3.0;
            worst = worst.max(rel_err(g.data()[i], numeric));
        }
    }
    worst
}

/// `Σ r ⊙ out` for fixed random weights `r`, turning any output into a scalar
/// loss that exercises every element.
pub fn weighted_sum(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = tape.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = tape.constant(Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0)));
    let p = tape.mul(out, r)?;
    Ok(tape.sum(p))
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero, for kinks at the origin.
pub fn away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values spaced well beyond the finite-difference step, for max pooling.
pub fn distinct(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    rand::seq::SliceRandom::shuffle(&mut v[..], rng);
    Tensor::new(shape.to_vec(), v).unwrap()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Outputs of one fusion block computed with plain loops.
pub struct CdfReference {
    pub i_cha: Vec<f64>,
    pub u_pre_cha: Vec<f64>,
    pub u_post_cha: Vec<f64>,
    pub i_spa: Vec<f64>,
    pub u_pre_spa: Vec<f64>,
    pub u_post_spa: Vec<f64>,
}

/// Literal transcription of the fusion equations:
///
/// ```text
/// i_cha[c]      = σ(b_r[c] + Σ_j W_r[c, j] · mean(concat(pre, post)[j]))
/// u_pre_cha     = i_cha[c] · post + pre
/// u_post_cha    = i_cha[c] · pre + post
/// i_spa[y, x]   = σ(b_s + Σ_j W_s[j] · concat(u_pre_cha, u_post_cha)[j, y, x])
/// u_pre_spa     = i_spa[y, x] · u_post_cha + pre
/// u_post_spa    = i_spa[y, x] · u_pre_cha + post
/// ```
#[allow(clippy::needless_range_loop)]
pub fn cdf_reference(p: &FusionParams<f64>, pre: &Tensor<f64>, post: &Tensor<f64>) -> CdfReference {
    let (c, h, w) = pre.chw().unwrap();
    let hw = h * w;
    let at = |t: &Tensor<f64>, ch: usize, y: usize, x: usize| t.data()[ch * hw + y * w + x];

    let mut pooled = vec![0.0; 2 * c];
    for j in 0..2 * c {
        let (src, ch) = if j < c { (pre, j) } else { (post, j - c) };
        let mut s = 0.0;
        for y in 0..h {
            for x in 0..w {
                s += at(src, ch, y, x);
            }
        }
        pooled[j] = s / hw as f64;
    }
    let mut i_cha = vec![0.0; c];
    for o in 0..c {
        let mut z = p.reduce_b.data()[o];
        for j in 0..2 * c {
            z += p.reduce_w.data()[o * 2 * c + j] * pooled[j];
        }
        i_cha[o] = sigmoid(z);
    }

    let mut u_pre_cha = vec![0.0; c * hw];
    let mut u_post_cha = vec![0.0; c * hw];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let k = ch * hw + y * w + x;
                u_pre_cha[k] = i_cha[ch] * at(post, ch, y, x) + at(pre, ch, y, x);
                u_post_cha[k] = i_cha[ch] * at(pre, ch, y, x) + at(post, ch, y, x);
            }
        }
    }

    let mut i_spa = vec![0.0; hw];
    for y in 0..h {
        for x in 0..w {
            let mut z = p.spatial_b.data()[0];
            for j in 0..2 * c {
                let v = if j < c {
                    u_pre_cha[j * hw + y * w + x]
                } else {
                    u_post_cha[(j - c) * hw + y * w + x]
                };
                z += p.spatial_w.data()[j] * v;
            }
            i_spa[y * w + x] = sigmoid(z);
        }
    }

    let mut u_pre_spa = vec![0.0; c * hw];
    let mut u_post_spa = vec![0.0; c * hw];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let k = ch * hw + y * w + x;
                let g = i_spa[y * w + x];
                u_pre_spa[k] = g * u_post_cha[k] + at(pre, ch, y, x);
                u_post_spa[k] = g * u_pre_cha[k] + at(post, ch, y, x);
            }
        }
    }
    CdfReference {
        i_cha,
        u_pre_cha,
        u_post_cha,
        i_spa,
        u_pre_spa,
        u_post_spa,
    }
}

/// Random block parameters with a wider spread than the initializer, so the
/// gates are far from 0.5.
pub fn random_fusion(rng: &mut impl Rng, c: usize) -> FusionParams<f64> {
    FusionParams {
        reduce_w: uniform(rng, &[c, 2 * c], -1.5, 1.5),
        reduce_b: uniform(rng, &[c], -0.5, 0.5),
        spatial_w: uniform(rng, &[1, 2 * c, 1, 1], -1.5, 1.5),
        spatial_b: uniform(rng, &[1], -0.5, 0.5),
    }
}

/// Class-id masks drawn uniformly from `0..=4`.
pub fn random_mask(rng: &mut impl Rng, h: usize, w: usize) -> damage_core::data::DamageMask {
    damage_core::data::DamageMask::new(h, w, (0..h * w).map(|_| rng.gen_range(0..5u8)).collect())
        .unwrap()
}

/// Scores recomputed pixel by pixel, straight from the definitions.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleScores {
    pub f1_building: f64,
    pub f1_per_class: [f64; 4],
    pub f1_damage: f64,
    pub f1_overall: f64,
}

fn oracle_f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    if 2 * tp + fp + fn_ == 0 {
        1.0
    } else {
        (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// Pools every pixel of every pair. Truth pixels of 255 are skipped; damage
/// classes absent from both truth and prediction drop out of the harmonic mean.
pub fn metrics_oracle(
    pairs: &[(damage_core::data::DamageMask, damage_core::data::DamageMask)],
) -> OracleScores {
    let (mut btp, mut bfp, mut bfn) = (0u64, 0u64, 0u64);
    let mut tp = [0u64; 5];
    let mut fp = [0u64; 5];
    let mut fn_ = [0u64; 5];
    let mut seen = [false; 5];
    for (truth, pred) in pairs {
        for (&t, &p) in truth.data().iter().zip(pred.data()) {
            if t == 255 {
                continue;
            }
            match (t != 0, p != 0) {
                (true, true) => btp += 1,
                (false, true) => bfp += 1,
                (true, false) => bfn += 1,
                _ => {}
            }
            for k in 1..5u8 {
                let i = k as usize;
                if t == k || p == k {
                    seen[i] = true;
                }
                if t == k && p == k {
                    tp[i] += 1;
                } else if p == k {
                    fp[i] += 1;
                } else if t == k {
                    fn_[i] += 1;
                }
            }
        }
    }
    let f1_building = oracle_f1(btp, bfp, bfn);
    let mut f1_per_class = [0.0; 4];
    let mut used = Vec::new();
    for k in 1..5 {
        f1_per_class[k - 1] = oracle_f1(tp[k], fp[k], fn_[k]);
        if seen[k] {
            used.push(f1_per_class[k - 1]);
        }
    }
    let f1_damage = if used.is_empty() {
        1.0
    } else if used.contains(&0.0) {
        0.0
    } else {
        used.len() as f64 / used.iter().map(|v| 1.0 / v).sum::<f64>()
    };
    OracleScores {
        f1_building,
        f1_per_class,
        f1_damage,
        f1_overall: 0.3 * f1_building + 0.7 * f1_damage,
    }
}

/// Offset separating post-image tags from pre-image tags.
pub const POST_TAG: f32 = 1_000_000.0;

/// A pair whose every image value names its own origin:
/// `((sample · C + ch) · H + r) · W + c`, plus [`POST_TAG`] on the post-image.
/// All values are integers below 2^24, so they survive `f32` exactly.
pub fn tagged_pair(
    sample: usize,
    mask: damage_core::data::DamageMask,
) -> damage_core::data::SamplePair {
    let (h, w) = mask.dims();
    let pre = Tensor::from_fn(&[3, h, w], |i| (sample * 3 * h * w + i) as f32);
    let post = pre.map(|v| v + POST_TAG);
    damage_core::data::SamplePair::new(format!("s{sample}"), pre, post, mask).unwrap()
}

/// `(sample, ch, r, c)` encoded by a [`tagged_pair`] pre-image value.
pub fn decode_tag(v: f32, h: usize, w: usize) -> (usize, usize, usize, usize) {
    let v = v as usize;
    let (c, v) = (v % w, v / w);
    let (r, v) = (v % h, v / h);
    (v / 3, v % 3, r, c)
}

/// Results of the stage-1 → stage-2 weight-sharing checks.
#[derive(Debug, Clone)]
pub struct PipelineAudit {
    /// Encoder skips and bottleneck of a probe image, stage 1 vs stage 2.
    pub encoder_features_identical: bool,
    pub stage1_params: usize,
    pub stage2_params: usize,
    /// `stage2 - (stage1 - stage1 head) - stage2 head - fusion`; zero when
    /// the backbone is shared, not duplicated.
    pub unexplained_params: i64,
    pub fusion_tensors: Vec<String>,
    /// Fusion tensors whose whole gradient is zero after one stage-2 step.
    pub zero_grad_fusion: Vec<String>,
    /// Individual zero gradient elements across all fusion tensors. A ReLU
    /// channel that is dead on the probe zeroes its reduce-weight column.
    pub zero_grad_elements: usize,
}

/// Builds both stages for `cfg`, trains stage 1 briefly, transfers, takes one
/// stage-2 step on synthetic data and inspects the fusion gradients.
pub fn pipeline_audit(
    cfg: &damage_core::pipeline::UNetConfig,
    size: usize,
    seed: u64,
) -> PipelineAudit {
    use damage_core::data::{generate_in_memory, SynthConfig};
    use damage_core::pipeline::{build_model, train, transfer_stage1_weights, Stage, TrainConfig};

    let data = generate_in_memory(&SynthConfig {
        num_pairs: 4,
        image_size: size,
        building_side_min: 3,
        building_side_max: size / 4,
        buildings_max: 4,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    let mut one = build_model(cfg, Stage::One, seed).unwrap();
    let tc1 = TrainConfig {
        epochs: 1,
        batch_size: 2,
        crop_size: size,
        learning_rate: 1e-3,
        ..TrainConfig::desk(Stage::One)
    };
    train(&mut one, &data, &[], &tc1, |_| {}).unwrap();

    let mut two = build_model(cfg, Stage::Two, seed + 1).unwrap();
    transfer_stage1_weights(&one.params, &mut two).unwrap();
    let probe = &data[0].pre;
    let encoder_features_identical =
        one.encoder_features(probe).unwrap() == two.encoder_features(probe).unwrap();

    let s1 = one.summary(size, size);
    let s2 = two.summary(size, size);
    let unexplained_params = s2.total_params as i64
        - (s1.total_params - s1.head_params) as i64
        - s2.head_params as i64
        - s2.fusion_params as i64;

    let tc2 = TrainConfig {
        epochs: 1,
        batch_size: data.len(),
        crop_size: size,
        learning_rate: 1e-3,
        cutmix: None,
        ..TrainConfig::desk(Stage::Two)
    };
    train(&mut two, &data, &[], &tc2, |_| {}).unwrap();
    let (_, grads) = two.loss_and_grads(&data[0]).unwrap();
    let fusion_tensors: Vec<String> = cfg
        .fusion_levels()
        .into_iter()
        .flat_map(damage_core::fusion::param_names)
        .collect();
    let zero_grad_fusion = fusion_tensors
        .iter()
        .filter(|n| {
            grads
                .get(*n)
                .is_none_or(|g| g.data().iter().all(|&v| v == 0.0))
        })
        .cloned()
        .collect();
    let zero_grad_elements = fusion_tensors
        .iter()
        .filter_map(|n| grads.get(n))
        .map(|g| g.data().iter().filter(|&&v| v == 0.0).count())
        .sum();
    PipelineAudit {
        encoder_features_identical,
        stage1_params: s1.total_params,
        stage2_params: s2.total_params,
        unexplained_params,
        fusion_tensors,
        zero_grad_fusion,
        zero_grad_elements,
    }
}

/// Random class ids with a rectangular blob of hard classes 2/3.
pub fn donor_mask(rng: &mut impl Rng, h: usize, w: usize) -> damage_core::data::DamageMask {
    let mut m = random_mask(rng, h, w);
    let (bh, bw) = (rng.gen_range(1..=h), rng.gen_range(1..=w));
    let (t, l) = (rng.gen_range(0..=h - bh), rng.gen_range(0..=w - bw));
    for r in t..t + bh {
        for c in l..l + bw {
            m.set(r, c, rng.gen_range(2..=3));
        }
    }
    m
}

/// Checks one mixed sample built from [`tagged_pair`] inputs: `m` is binary,
/// and every output pixel of the pre-image, post-image and label comes from
/// the same coordinate of the sample that `m` selects (`ids.0` where `m` is 1,
/// `ids.1` where it is 0).
pub fn check_mix(
    out: &damage_core::data::SamplePair,
    recipient: &damage_core::data::SamplePair,
    donor: &damage_core::data::SamplePair,
    m: &damage_core::cutmix::BinaryMask,
    ids: (usize, usize),
) -> Result<(), String> {
    let (h, w) = out.dims();
    if m.dims() != (h, w) {
        return Err(format!("mask {:?} vs sample {:?}", m.dims(), (h, w)));
    }
    for r in 0..h {
        for c in 0..w {
            let keep = m.get(r, c);
            if keep > 1 {
                return Err(format!("mask value {keep} at ({r}, {c})"));
            }
            let src = if keep == 1 { ids.0 } else { ids.1 };
            for ch in 0..3 {
                let i = (ch * h + r) * w + c;
                let pre = decode_tag(out.pre.data()[i], h, w);
                let post = decode_tag(out.post.data()[i] - POST_TAG, h, w);
                if pre != (src, ch, r, c) || post != (src, ch, r, c) {
                    return Err(format!("pixel ({r}, {c}) ch {ch}: pre {pre:?} post {post:?}, expected sample {src}"));
                }
            }
            let label = if keep == 1 {
                recipient.mask.get(r, c)
            } else {
                donor.mask.get(r, c)
            };
            if out.mask.get(r, c) != label {
                return Err(format!("label at ({r}, {c}) not taken from sample {src}"));
            }
        }
    }
    Ok(())
}

/// `(hard, area)`: pixels of `classes` in `mask` inside the zero box of `m`,
/// and the box area.
pub fn box_hard_count(
    mask: &damage_core::data::DamageMask,
    m: &damage_core::cutmix::BinaryMask,
    classes: &[u8],
) -> (usize, usize) {
    let Some((top, left, bh, bw)) = m.zero_bounds() else {
        return (0, 0);
    };
    let mut hard = 0;
    for r in top..top + bh {
        for c in left..left + bw {
            hard += classes.contains(&mask.get(r, c)) as usize;
        }
    }
    (hard, bh * bw)
}
