//! Rayon against the sequential fallback for the data-parallel loops:
//! metrics, score-map post-processing, synthetic generation and loading.

use std::hint::black_box;

use candle_core::{Device, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use featrecon::data::{self, Split, SyntheticConfig};
use featrecon::graph::{Pair, PairId, PairSet, Pass};
use featrecon::metrics::{aupro, evaluate, EvalInput};
use featrecon::par::Exec;
use featrecon::scoring::{score_batch, Reduction};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn maps_and_masks(n: usize, side: usize) -> (Vec<Array2<f32>>, Vec<Array2<bool>>) {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let masks: Vec<Array2<bool>> = (0..n)
        .map(|i| {
            let c = r.random_range(8..side - 8);
            Array2::from_shape_fn((side, side), |(y, x)| i % 2 == 1 && y.abs_diff(c) < 6 && x.abs_diff(c) < 6)
        })
        .collect();
    let maps = masks
        .iter()
        .map(|m| m.mapv(|a| r.random_range(0.0f32..1.0) + if a { 0.5 } else { 0.0 }))
        .collect();
    (maps, masks)
}

fn metrics(c: &mut Criterion) {
    let (maps, masks) = maps_and_masks(32, 64);
    let scores: Vec<f64> = maps.iter().map(|m| m.fold(0.0f32, |a, &b| a.max(b)) as f64).collect();
    let labels: Vec<bool> = (0..maps.len()).map(|i| i % 2 == 1).collect();
    let categories = vec!["bench".to_string(); maps.len()];
    let views: Vec<_> = maps.iter().map(|m| m.view()).collect();
    let mviews: Vec<_> = masks.iter().map(|m| m.view()).collect();

    let mut g = c.benchmark_group("metrics");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::new("aupro", name), &exec, |b, &exec| {
            b.iter(|| aupro(black_box(&views), &mviews, 0.3, exec).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("evaluate", name), &exec, |b, &exec| {
            let input = EvalInput {
                image_scores: &scores,
                labels: &labels,
                categories: &categories,
                maps: &maps,
                masks: Some(&masks),
            };
            b.iter(|| evaluate(black_box(&input), 0.3, exec).unwrap())
        });
    }
    g.finish();
}

fn scoring(c: &mut Criterion) {
    let dev = Device::Cpu;
    let stages = [(16, 64), (32, 32), (64, 16)];
    let pairs = PairSet::new(
        stages
            .iter()
            .enumerate()
            .map(|(k, &(ch, side))| Pair {
                target: Tensor::randn(0f32, 1.0, (16, ch, side, side), &dev).unwrap(),
                recon: Tensor::randn(0f32, 1.0, (16, ch, side, side), &dev).unwrap(),
                id: PairId { pass: Pass::Single, stage: k },
            })
            .collect(),
    )
    .unwrap();

    let mut g = c.benchmark_group("scoring");
    g.sample_size(10);
    for (name, exec) in MODES {
        for sigma in [None, Some(4.0)] {
            let id = format!("{name}/sigma_{}", sigma.map_or("none".into(), |s: f64| s.to_string()));
            g.bench_function(id, |b| {
                b.iter(|| score_batch(black_box(&pairs), (256, 256), sigma, Reduction::Max, exec).unwrap())
            });
        }
    }
    g.finish();
}

fn synth_and_data(c: &mut Criterion) {
    let cfg = SyntheticConfig::new(3, 24, 8, 16, 128);
    let mut g = c.benchmark_group("data");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::new("synth", name), &exec, |b, &exec| {
            b.iter_with_setup(
                || tempfile::tempdir().unwrap(),
                |dir| {
                    data::make_synthetic_dataset(&cfg, dir.path(), exec).unwrap();
                    dir
                },
            )
        });
    }
    let dir = tempfile::tempdir().unwrap();
    let (spec, _) = data::make_synthetic_dataset(&cfg, dir.path(), Exec::Auto).unwrap();
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::new("load_test_split", name), &exec, |b, &exec| {
            b.iter(|| data::load_split(black_box(&spec), Split::Test, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, metrics, scoring, synth_and_data);
criterion_main!(benches);
