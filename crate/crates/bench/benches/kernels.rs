use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use pccomp::distances::{cd, grad_cd, grad_rcd_with, rcd_with, Norm, RcdParams};
use pccomp::geometry::{farthest_point_sample, knn};
use pccomp::losses::{composite_loss, FrozenEncoder, LossParams, LossWeights};
use pccomp::normals::{grad_ncc, ncc, NccGradMode, NccVariant};
use pccomp::patch::{partition, patchify, Ratio};
use pccomp::synth::{generate_shape, Primitive, ShapeSpec};
use pccomp::PointCloud;

fn shape(primitive: Primitive, n_points: usize, seed: u64) -> PointCloud {
    generate_shape(&ShapeSpec {
        primitive,
        n_points,
        rng_seed: seed,
    })
    .expect("valid shape")
}

fn bench_search(c: &mut Criterion) {
    let mut g = c.benchmark_group("search");
    for n in [256, 1024, 4096] {
        let cloud = shape(Primitive::Sphere, n, 1);
        g.bench_with_input(BenchmarkId::new("knn_k16", n), &cloud, |b, cloud| {
            b.iter(|| knn(black_box(cloud), cloud, 16).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("fps_m64", n), &cloud, |b, cloud| {
            b.iter(|| farthest_point_sample(black_box(cloud), 64, 0).unwrap())
        });
    }
    g.finish();
}

fn bench_distances(c: &mut Criterion) {
    let mut g = c.benchmark_group("distances");
    for n in [256, 1024, 2048] {
        let a = shape(Primitive::Sphere, n, 1);
        let b = shape(Primitive::Box, n, 2);
        g.bench_with_input(BenchmarkId::new("cd", n), &(&a, &b), |bn, (a, b)| {
            bn.iter(|| cd(black_box(a), b, Norm::L2).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("grad_cd", n), &(&a, &b), |bn, (a, b)| {
            bn.iter(|| grad_cd(black_box(a), b, Norm::L2).unwrap())
        });
        let params = RcdParams::default();
        g.bench_with_input(BenchmarkId::new("rcd", n), &(&a, &b), |bn, (a, b)| {
            bn.iter(|| rcd_with(black_box(a), b, &params).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("grad_rcd", n), &(&a, &b), |bn, (a, b)| {
            bn.iter(|| grad_rcd_with(black_box(a), b, &params).unwrap())
        });
    }
    g.finish();
}

fn bench_ncc(c: &mut Criterion) {
    let mut g = c.benchmark_group("ncc");
    g.sample_size(20);
    let cloud = shape(Primitive::Sphere, 1024, 3);
    g.bench_function("forward_1024", |b| {
        b.iter(|| ncc(black_box(&cloud), 8, NccVariant::Variance).unwrap())
    });
    for mode in [NccGradMode::Analytic, NccGradMode::FiniteDiff] {
        g.bench_function(format!("grad_{mode}_1024"), |b| {
            b.iter(|| grad_ncc(black_box(&cloud), 8, NccVariant::Variance, mode).unwrap())
        });
    }
    g.finish();
}

fn bench_composite(c: &mut Criterion) {
    let mut g = c.benchmark_group("composite");
    g.sample_size(20);
    let partial = shape(Primitive::Table, 512, 4);
    let prediction = shape(Primitive::Table, 1024, 5);
    let split = partition(patchify(&partial, 64, 32, 0).unwrap(), Ratio::default(), 0).unwrap();
    let encoder = FrozenEncoder::new(FrozenEncoder::DEFAULT_DIM, 0).unwrap();
    let weights = LossWeights::default();
    let params = LossParams::default();
    g.bench_function("loss_and_gradient", |b| {
        b.iter(|| composite_loss(black_box(&partial), &prediction, &split, &weights, &params, &encoder).unwrap())
    });
    g.finish();
}

criterion_group!(benches, bench_search, bench_distances, bench_ncc, bench_composite);
criterion_main!(benches);
