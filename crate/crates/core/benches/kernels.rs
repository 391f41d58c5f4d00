//! Sequential vs rayon timings of the hot paths. Both modes produce identical
//! results; only wall time differs.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use damage_core::cutmix::{augment_batch, donor_indices, CutMixPolicy};
use damage_core::data::{generate_in_memory, DamageMask, SamplePair, SynthConfig};
use damage_core::metrics::{Aggregation, MetricsReport};
use damage_core::par;
use damage_core::pipeline::{build_model, transfer_stage1_weights, Model, Stage, UNetConfig};
use damage_core::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, bool); 2] = [("sequential", false), ("parallel", true)];

fn synthetic(n: usize) -> Vec<SamplePair> {
    generate_in_memory(&SynthConfig {
        num_pairs: n,
        seed: 1,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn conv2d(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::<f32>::from_fn(&[16, 64, 64], |_| rng.gen_range(-1.0..1.0));
    let w = Tensor::<f32>::from_fn(&[32, 16, 3, 3], |_| rng.gen_range(-0.1..0.1));
    let mut g = c.benchmark_group("conv2d_fwd_bwd_16x64x64_to_32");
    for (name, on) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::set_parallel(on);
            b.iter(|| {
                let mut t = Tape::new();
                let xv = t.leaf(x.clone(), true);
                let wv = t.leaf(w.clone(), true);
                let y = t.conv2d(xv, wv, None).unwrap();
                let l = t.sum(y);
                black_box(t.backward(l).unwrap());
            });
        });
    }
    g.finish();
}

fn stage2_model() -> Model {
    let cfg = UNetConfig {
        base_channels: 8,
        ..UNetConfig::default()
    };
    let one = build_model(&cfg, Stage::One, 0).unwrap();
    let mut two = build_model(&cfg, Stage::Two, 1).unwrap();
    transfer_stage1_weights(&one.params, &mut two).unwrap();
    two
}

fn batch_gradients(c: &mut Criterion) {
    let model = stage2_model();
    let batch = synthetic(4);
    let mut g = c.benchmark_group("stage2_batch4_loss_and_grads_64px");
    g.sample_size(10);
    for (name, on) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::set_parallel(on);
            b.iter(|| {
                black_box(par::map_indexed(batch.len(), |i| {
                    model.loss_and_grads(&batch[i]).unwrap()
                }))
            });
        });
    }
    g.finish();
}

fn confusion(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mask = || {
        DamageMask::new(
            256,
            256,
            (0..256 * 256).map(|_| rng.gen_range(0..5)).collect(),
        )
        .unwrap()
    };
    let masks: Vec<(DamageMask, DamageMask)> = (0..32).map(|_| (mask(), mask())).collect();
    let tiles: Vec<_> = masks.iter().map(|(t, p)| (t, p)).collect();
    let mut g = c.benchmark_group("pooled_metrics_32x256px");
    for (name, on) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::set_parallel(on);
            b.iter(|| black_box(MetricsReport::from_tiles(&tiles, Aggregation::Pooled).unwrap()));
        });
    }
    g.finish();
}

fn cutmix(c: &mut Criterion) {
    let data = synthetic(32);
    let policy = CutMixPolicy {
        probability: 1.0,
        ..CutMixPolicy::default()
    };
    let donors: Vec<SamplePair> = donor_indices(&data, &policy)
        .into_iter()
        .map(|i| data[i].clone())
        .collect();
    let mut g = c.benchmark_group("cutmix_batch32_64px");
    for (name, on) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::set_parallel(on);
            b.iter(|| black_box(augment_batch(&data, &donors, &policy, 7).unwrap()));
        });
    }
    g.finish();
}

criterion_group!(benches, conv2d, batch_gradients, confusion, cutmix);
criterion_main!(benches);
