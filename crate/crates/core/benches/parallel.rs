//! Sequential vs parallel execution of the data-parallel kernels.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use odet::conv::{conv2d_with, ConvSpec};
use odet::eval::{evaluate_dataset_with, EvalConfig, GroundTruth, ImageDetection};
use odet::geometry::{iou_matrix, Polygon, RotatedBox};
use odet::okm::frequency_gate;
use odet::{Exec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const POLICIES: [(&str, Exec); 2] = [("seq", Exec::Sequential), ("par", Exec::Parallel)];

fn boxes(rng: &mut ChaCha8Rng, n: usize) -> Vec<Polygon> {
    (0..n)
        .map(|_| {
            RotatedBox::new(
                rng.random_range(0.0..200.0),
                rng.random_range(0.0..200.0),
                rng.random_range(5.0..40.0),
                rng.random_range(5.0..40.0),
                rng.random_range(-1.5..1.5),
            )
            .unwrap()
            .to_polygon()
        })
        .collect()
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::randn([4, 32, 48, 48], &mut rng);
    let k = Tensor::randn([32, 32, 3, 3], &mut rng);
    let spec = ConvSpec::same(3, 3).unwrap();
    let mut g = c.benchmark_group("conv2d 4x32x48x48 k3");
    for (name, exec) in POLICIES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| conv2d_with(exec, black_box(&x), &k, None, &spec).unwrap())
        });
    }
    g.finish();
}

fn fsam(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::randn([2, 32, 64, 64], &mut rng);
    let gate = Tensor::filled([1, 32, 4, 1], 1.1);
    let mut g = c.benchmark_group("frequency gate 2x32x64x64");
    for (name, exec) in POLICIES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| frequency_gate(exec, black_box(&x), &gate).unwrap())
        });
    }
    g.finish();
}

fn iou(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = boxes(&mut rng, 300);
    let b = boxes(&mut rng, 300);
    let mut g = c.benchmark_group("iou_matrix 300x300");
    for (name, exec) in POLICIES {
        g.bench_function(BenchmarkId::from_parameter(name), |bch| {
            bch.iter(|| iou_matrix(exec, black_box(&a), &b))
        });
    }
    g.finish();
}

fn eval(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cats: Vec<String> = (0..15).map(|i| format!("cat{i}")).collect();
    let polys = boxes(&mut rng, 3000);
    let gts: Vec<GroundTruth> = polys[..1500]
        .iter()
        .enumerate()
        .map(|(i, p)| GroundTruth {
            image_id: format!("img{}", i % 20),
            polygon: p.clone(),
            category: cats[i % cats.len()].clone(),
            difficult: i % 11 == 0,
        })
        .collect();
    let dets: Vec<ImageDetection> = polys
        .iter()
        .enumerate()
        .map(|(i, p)| ImageDetection {
            image_id: format!("img{}", i % 20),
            polygon: p.translated(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)),
            category: cats[i % cats.len()].clone(),
            score: rng.random_range(0.0..1.0),
        })
        .collect();
    let cfg = EvalConfig::default();
    let mut g = c.benchmark_group("evaluate 15 categories");
    for (name, exec) in POLICIES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate_dataset_with(exec, black_box(&dets), &gts, &cfg).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, conv, fsam, iou, eval);
criterion_main!(benches);
