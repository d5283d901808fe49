//! Benchmarks of the paths that dominate experiment wall time: mask algebra
//! over whole graph families, influence rank tests, the assignment inside
//! MCC, and one training step of the desk-scale VAE.

use criterion::{criterion_group, criterion_main, Criterion};
use mechsparse::graph_algebra::{
    check_graphical_criterion, entanglement_mask, BinaryGraph, ConsistencyMode,
};
use mechsparse::latent_models::{check_influence_a_cont, TransitionSpec};
use mechsparse::metrics::{max_weight_assignment, mcc};
use mechsparse::sparse_vae::{train, TrainConfig};
use mechsparse::synth_data::{build_decoder, sample_dataset};
use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn bench_mask_algebra(c: &mut Criterion) {
    // Every 4x4 gz with a 1-column ga.
    c.bench_function("entanglement_mask_exhaustive_4x4", |b| {
        b.iter(|| {
            let mut acc = 0usize;
            for bits in 0u32..(1 << 16) {
                let gz = Array2::from_shape_fn((4, 4), |(i, j)| ((bits >> (4 * i + j)) & 1) as u8);
                let graph = BinaryGraph::time_only(gz).unwrap();
                let em = entanglement_mask(&graph, ConsistencyMode::Z).unwrap();
                acc += em.mask[[0, 0]] as usize;
                acc += check_graphical_criterion(&graph).holds as usize;
            }
            black_box(acc)
        })
    });
}

fn bench_influence(c: &mut Criterion) {
    let spec = TransitionSpec::action_non_diag(10);
    c.bench_function("check_influence_a_cont_d10", |b| {
        b.iter(|| black_box(check_influence_a_cont(&spec, 0, 1e-6, 7).unwrap().pass))
    });
}

fn bench_assignment(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = Array2::from_shape_fn((10, 10), |_| rng.gen_range(0.0..1.0));
    c.bench_function("hungarian_10x10", |b| {
        b.iter(|| black_box(max_weight_assignment(&w.view())))
    });
    let z = Array2::from_shape_fn((5000, 10), |_| rng.gen_range(-1.0..1.0));
    let zh = Array2::from_shape_fn((5000, 10), |_| rng.gen_range(-1.0..1.0));
    c.bench_function("mcc_5000x10", |b| {
        b.iter(|| black_box(mcc(&z.view(), &zh.view()).unwrap().0))
    });
}

fn bench_train_steps(c: &mut Criterion) {
    let spec = TransitionSpec::action_diag(5);
    let dec = build_decoder(5, 10, &[20, 20, 20], 1).unwrap();
    let ds = sample_dataset(&spec, &dec, 2_000, 1, 0.01, 2).unwrap();
    c.bench_function("train_100_steps_desk_scale", |b| {
        b.iter(|| {
            let cfg = TrainConfig {
                eval_every: 100,
                ..TrainConfig::desk(5.0, 100, 0)
            };
            black_box(train(&ds, &cfg).unwrap().log.rows.len())
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_mask_algebra, bench_influence, bench_assignment, bench_train_steps
}
criterion_main!(benches);
