//! Acceptance suite. Each test prints one `PASS`/`FAIL` line, written straight
//! to stdout so it shows up without `--nocapture`.
//!
//! Criteria 6 and 7 train real models on 200 synthetic tiles and take several
//! minutes; they hold a lock so their wall time is not inflated by each other.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use common::{
    box_hard_count, cdf_reference, check_mix, donor_mask, gradcheck, metrics_oracle,
    pipeline_audit, random_fusion, tagged_pair, uniform, weighted_sum,
};
use damage_core::cutmix::{augment_batch_detailed, CutMixPolicy};
use damage_core::data::{
    generate_in_memory, write_mask_png, write_rgb_png, DamageMask, SamplePair, SynthConfig,
};
use damage_core::fusion::{cdf_block, evaluate, FusionVars};
use damage_core::metrics::{
    harmonic_mean, overall_score, Aggregation, ConfusionMatrix, MetricsReport,
};
use damage_core::pipeline::{
    build_model, save_model, train, transfer_stage1_weights, EpochLog, Model, ModelSidecar, Stage,
    TrainConfig, UNetConfig,
};
use damage_core::tensor::{Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{verdict} criterion {id} ({name}): {detail}");
    let _ = out.flush();
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

#[test]
fn criterion_1_metric_arithmetic() {
    let ours = overall_score(0.864, 0.778);
    let base = overall_score(0.864, 0.757);
    let hm_ours = harmonic_mean(&[0.927, 0.610, 0.781, 0.873]);
    let hm_base = harmonic_mean(&[0.923, 0.578, 0.760, 0.869]);
    let pass = (ours - 0.804).abs() <= 5e-4
        && (base - 0.789).abs() <= 5e-4
        && (hm_ours - 0.778).abs() <= 1e-3
        && (hm_base - 0.757).abs() <= 1e-3;
    report(
        1,
        "metric arithmetic",
        pass,
        &format!("F1_s {ours:.4} / {base:.4}, F1_d from classes {hm_ours:.4} / {hm_base:.4}"),
    );
}

#[test]
fn criterion_2_metric_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut pairs = Vec::with_capacity(1000);
    for _ in 0..1000 {
        // Random class subsets so absent classes are exercised too.
        let allowed: Vec<u8> = (0..5u8).filter(|_| rng.gen_bool(0.7)).chain([0]).collect();
        let mut mask = || {
            let data = (0..256)
                .map(|_| allowed[rng.gen_range(0..allowed.len())])
                .collect();
            DamageMask::new(16, 16, data).unwrap()
        };
        let t = mask();
        let p = mask();
        pairs.push((t, p));
    }
    let mut mismatches = 0;
    let mut stream = ConfusionMatrix::new();
    for pair in &pairs {
        let mut cm = ConfusionMatrix::new();
        cm.accumulate(&pair.0, &pair.1).unwrap();
        stream.accumulate(&pair.0, &pair.1).unwrap();
        let got = MetricsReport::from_confusion(cm);
        let want = metrics_oracle(std::slice::from_ref(pair));
        if (
            got.f1_building,
            got.f1_per_class,
            got.f1_damage,
            got.f1_overall,
        ) != (
            want.f1_building,
            want.f1_per_class,
            want.f1_damage,
            want.f1_overall,
        ) {
            mismatches += 1;
        }
    }
    let pooled = MetricsReport::from_confusion(stream);
    let tiles: Vec<_> = pairs.iter().map(|(t, p)| (t, p)).collect();
    let parallel = MetricsReport::from_tiles(&tiles, Aggregation::Pooled).unwrap();
    let want = metrics_oracle(&pairs);
    let pooled_ok = (
        pooled.f1_building,
        pooled.f1_per_class,
        pooled.f1_damage,
        pooled.f1_overall,
    ) == (
        want.f1_building,
        want.f1_per_class,
        want.f1_damage,
        want.f1_overall,
    ) && parallel == pooled;
    report(
        2,
        "metric oracle",
        mismatches == 0 && pooled_ok,
        &format!(
            "{mismatches}/1000 per-pair mismatches, pooled exact: {pooled_ok} (F1_s {:.6})",
            pooled.f1_overall
        ),
    );
}

#[test]
fn criterion_3_fusion() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_value: f64 = 0.0;
    let mut worst_grad: f64 = 0.0;
    for k in 0..100u64 {
        let c = rng.gen_range(1..=4);
        let h = rng.gen_range(1..=4);
        let w = rng.gen_range(1..=4);
        let p = random_fusion(&mut rng, c);
        let pre = uniform(&mut rng, &[c, h, w], -2.0, 2.0);
        let post = uniform(&mut rng, &[c, h, w], -2.0, 2.0);
        let got = evaluate(&p, &pre, &post).unwrap();
        let want = cdf_reference(&p, &pre, &post);
        for (g, r) in [
            (&got.i_cha, &want.i_cha),
            (&got.u_pre_cha, &want.u_pre_cha),
            (&got.u_post_cha, &want.u_post_cha),
            (&got.i_spa, &want.i_spa),
            (&got.u_pre_spa, &want.u_pre_spa),
            (&got.u_post_spa, &want.u_post_spa),
        ] {
            for (a, b) in g.data().iter().zip(r) {
                worst_value = worst_value.max((a - b).abs());
            }
        }
        let inputs = vec![pre, post, p.reduce_w, p.reduce_b, p.spatial_w, p.spatial_b];
        let err = gradcheck(&inputs, &move |t: &mut Tape<f64>, v: &[Var]| {
            let vars = FusionVars {
                reduce_w: v[2],
                reduce_b: v[3],
                spatial_w: v[4],
                spatial_b: v[5],
            };
            let tr = cdf_block(t, v[0], v[1], &vars)?;
            let both = t.concat_channels(tr.spatial.u_pre_spa, tr.spatial.u_post_spa)?;
            weighted_sum(t, both, k)
        });
        worst_grad = worst_grad.max(err);
    }
    report(
        3,
        "fusion correctness",
        worst_value <= 1e-6 && worst_grad < 1e-4,
        &format!("max |output - loops| {worst_value:.2e}, max gradient rel err {worst_grad:.2e} over 100 blocks"),
    );
}

#[test]
fn criterion_4_cutmix() {
    let mut mixes = 0usize;
    let mut failures = Vec::new();
    let mut passthrough_ok = true;
    let mut seed = 0u64;
    while mixes < 1000 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (rng.gen_range(4..24), rng.gen_range(4..24));
        let min_hard = rng.gen_range(0.0..0.6);
        let batch: Vec<SamplePair> = (0..2)
            .map(|i| tagged_pair(i, common::random_mask(&mut rng, h, w)))
            .collect();
        let donors: Vec<SamplePair> = (0..3)
            .map(|i| tagged_pair(2 + i, donor_mask(&mut rng, h, w)))
            .collect();
        let policy = CutMixPolicy::new(&[2, 3], 1.0, [0.2, 0.5], min_hard, seed).unwrap();
        for (i, o) in augment_batch_detailed(&batch, &donors, &policy, seed)
            .unwrap()
            .iter()
            .enumerate()
        {
            match &o.mix {
                Some((d, m)) => {
                    mixes += 1;
                    if let Err(e) = check_mix(&o.sample, &batch[i], &donors[*d], m, (i, 2 + d)) {
                        failures.push(format!("seed {seed}: {e}"));
                    }
                    let (hard, area) = box_hard_count(&donors[*d].mask, m, &policy.target_classes);
                    if area == 0 || (hard as f64) < min_hard * area as f64 {
                        failures.push(format!(
                            "seed {seed}: {hard}/{area} hard pixels < {min_hard}"
                        ));
                    }
                }
                None => {
                    if o.sample != batch[i] {
                        failures.push(format!("seed {seed}: unmixed sample changed"));
                    }
                }
            }
        }
        let off = CutMixPolicy {
            probability: 0.0,
            ..policy
        };
        let out = augment_batch_detailed(&batch, &donors, &off, seed).unwrap();
        passthrough_ok &= out
            .iter()
            .zip(&batch)
            .all(|(o, b)| o.mix.is_none() && &o.sample == b);
        seed += 1;
    }
    report(
        4,
        "CutMix law",
        failures.is_empty() && passthrough_ok,
        &format!(
            "{mixes} mixes from {seed} seeds, {} violations{}, probability-0 pass-through: {passthrough_ok}",
            failures.len(),
            failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default()
        ),
    );
}

fn acceptance_unet() -> UNetConfig {
    UNetConfig {
        base_channels: 8,
        ..UNetConfig::default()
    }
}

#[test]
fn criterion_5_pipeline_integrity() {
    let a = pipeline_audit(&acceptance_unet(), 64, 5);
    let pass =
        a.encoder_features_identical && a.unexplained_params == 0 && a.zero_grad_fusion.is_empty();
    report(
        5,
        "pipeline integrity",
        pass,
        &format!(
            "encoder features identical: {}, params {} -> {} ({} unexplained), {}/{} fusion tensors with nonzero gradient ({} zero elements)",
            a.encoder_features_identical,
            a.stage1_params,
            a.stage2_params,
            a.unexplained_params,
            a.fusion_tensors.len() - a.zero_grad_fusion.len(),
            a.fusion_tensors.len(),
            a.zero_grad_elements,
        ),
    );
}

// Criteria 6 and 7: 200 synthetic 64x64 pairs, the last 40 held out.

const DATA_SEED: u64 = 2024;
const HOLDOUT: usize = 40;
const STAGE1_SEED: u64 = 1;
const STAGE2_SEEDS: [u64; 3] = [0, 1, 2];

fn dataset() -> &'static Vec<SamplePair> {
    static DATA: OnceLock<Vec<SamplePair>> = OnceLock::new();
    DATA.get_or_init(|| {
        generate_in_memory(&SynthConfig {
            num_pairs: 200,
            image_size: 64,
            seed: DATA_SEED,
            ..SynthConfig::default()
        })
        .unwrap()
    })
}

fn split() -> (&'static [SamplePair], &'static [SamplePair]) {
    let d = dataset();
    d.split_at(d.len() - HOLDOUT)
}

fn stage1_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 2e-3,
        epochs: 12,
        crop_size: 32,
        batch_size: 4,
        ..TrainConfig::desk(Stage::One)
    }
}

fn stage2_config(seed: u64, cutmix: bool) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        epochs: 30,
        seed,
        crop_size: 32,
        batch_size: 4,
        cutmix: cutmix.then(CutMixPolicy::default),
        ..TrainConfig::desk(Stage::Two)
    }
}

struct Stage1Run {
    model: Model,
    history: Vec<EpochLog>,
    elapsed: Duration,
}

fn run_stage1() -> Stage1Run {
    let (tr, ho) = split();
    let t = Instant::now();
    let mut model = build_model(&acceptance_unet(), Stage::One, STAGE1_SEED).unwrap();
    let r = train(&mut model, tr, ho, &stage1_config(), |_| {}).unwrap();
    Stage1Run {
        model,
        history: r.history,
        elapsed: t.elapsed(),
    }
}

fn heavy() -> std::sync::MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn stage1() -> &'static Stage1Run {
    static RUN: OnceLock<Stage1Run> = OnceLock::new();
    RUN.get_or_init(run_stage1)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn criterion_6_learning_signal() {
    let _guard = heavy();
    let s1 = stage1();
    let f1_b = s1
        .history
        .last()
        .unwrap()
        .metrics
        .as_ref()
        .unwrap()
        .f1_building;

    let (tr, ho) = split();
    let t = Instant::now();
    let mut with = Vec::new();
    let mut without = Vec::new();
    for seed in STAGE2_SEEDS {
        for cutmix in [true, false] {
            let mut m = build_model(&acceptance_unet(), Stage::Two, 100 + seed).unwrap();
            transfer_stage1_weights(&s1.model.params, &mut m).unwrap();
            let r = train(&mut m, tr, ho, &stage2_config(seed, cutmix), |_| {}).unwrap();
            let minor = r
                .history
                .last()
                .unwrap()
                .metrics
                .as_ref()
                .unwrap()
                .f1_per_class[1];
            if cutmix {
                with.push(minor)
            } else {
                without.push(minor)
            }
        }
    }
    let total = s1.elapsed + t.elapsed();
    let (mw, mo) = (median(with.clone()), median(without.clone()));
    let pass = f1_b >= 0.85 && mw > mo && total <= Duration::from_secs(15 * 60);
    report(
        6,
        "learning signal",
        pass,
        &format!(
            "held-out F1_b {f1_b:.4}; minor F1 with CutMix {with:.3?} (median {mw:.4}) vs without {without:.3?} (median {mo:.4}); {:.0} s",
            total.as_secs_f64()
        ),
    );
}

fn write_run(dir: &Path, run: &Stage1Run) -> (Vec<u8>, Vec<u8>, Vec<u8>) {
    let ckpt = dir.join("stage1.ckpt");
    let sidecar = ModelSidecar {
        epochs_trained: run.history.len(),
        train: Some(stage1_config()),
        history: run.history.clone(),
        ..ModelSidecar::for_model(&run.model)
    };
    save_model(&ckpt, &run.model, &sidecar).unwrap();
    let log: String = run
        .history
        .iter()
        .map(|l| l.to_json_line() + "\n")
        .collect();
    let read = |p: &Path| std::fs::read(p).unwrap();
    (
        read(&ckpt),
        read(&dir.join("stage1.ckpt.json")),
        log.into_bytes(),
    )
}

#[test]
fn criterion_7_determinism() {
    let _guard = heavy();
    let first = stage1();
    let second = run_stage1();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ca, sa, la) = write_run(a.path(), first);
    let (cb, sb, lb) = write_run(b.path(), &second);
    let pass = ca == cb && sa == sb && la == lb;
    report(
        7,
        "determinism",
        pass,
        &format!(
            "checkpoint {} bytes identical: {}, sidecar identical: {}, log ({} lines) identical: {}",
            ca.len(),
            ca == cb,
            sa == sb,
            first.history.len(),
            la == lb
        ),
    );
}

#[test]
fn criterion_8_render_round_trip() {
    let bin = env!("CARGO_BIN_EXE_damage");
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let pairs = generate_in_memory(&SynthConfig {
        num_pairs: 50,
        seed: 8,
        ..SynthConfig::default()
    })
    .unwrap();
    let mut exact = 0;
    let mut problems = Vec::new();
    for p in &pairs {
        let (pre, post, mask, png, back) = (
            d.join(format!("{}_pre.png", p.id)),
            d.join(format!("{}_post.png", p.id)),
            d.join(format!("{}_mask.png", p.id)),
            d.join(format!("{}_render.png", p.id)),
            d.join(format!("{}_decoded.png", p.id)),
        );
        write_rgb_png(&pre, &p.pre).unwrap();
        write_rgb_png(&post, &p.post).unwrap();
        write_mask_png(&mask, &p.mask).unwrap();
        let render = Command::new(bin)
            .arg("render")
            .args([&pre, &post, &mask])
            .arg("--out")
            .arg(&png)
            .output()
            .unwrap();
        let decode = Command::new(bin)
            .arg("decode")
            .arg(&png)
            .args(["--panel", "2", "--out"])
            .arg(&back)
            .output()
            .unwrap();
        if !render.status.success() || !decode.status.success() {
            problems.push(format!(
                "{}: {}",
                p.id,
                String::from_utf8_lossy(&[render.stderr, decode.stderr].concat())
            ));
            continue;
        }
        match damage_core::data::read_mask_png(&back) {
            Ok(m) if m == p.mask => exact += 1,
            Ok(_) => problems.push(format!("{}: decoded mask differs", p.id)),
            Err(e) => problems.push(format!("{}: {e}", p.id)),
        }
    }
    report(
        8,
        "render round trip",
        exact == 50,
        &format!(
            "{exact}/50 masks recovered exactly{}",
            problems
                .first()
                .map(|p| format!(" (first problem: {p})"))
                .unwrap_or_default()
        ),
    );
}
