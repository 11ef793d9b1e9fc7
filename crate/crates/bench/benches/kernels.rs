use coatnet_core::metrics::{average_precision, pr_curve};
use coatnet_core::nn::{depthwise_conv2d, global_self_attention, DepthwiseKernel, Padding};
use coatnet_core::Tensor;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn depthwise(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("depthwise_conv2d");
    for size in [16, 32, 64] {
        let x = random(&mut rng, &[64, size, size]);
        let kernel = DepthwiseKernel::new(random(&mut rng, &[64, 3, 3]), Padding::Same, 1).unwrap();
        group.throughput(Throughput::Elements((64 * size * size) as u64));
        group.bench_with_input(BenchmarkId::from_parameter(size), &x, |b, x| {
            b.iter(|| depthwise_conv2d(black_box(x), &kernel).unwrap())
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut group = c.benchmark_group("global_self_attention");
    for side in [4, 8, 16] {
        let x = random(&mut rng, &[32, side, side]);
        group.throughput(Throughput::Elements((side * side) as u64));
        group.bench_with_input(BenchmarkId::from_parameter(side * side), &x, |b, x| {
            b.iter(|| global_self_attention(black_box(x)).unwrap())
        });
    }
    group.finish();
}

fn ap(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut group = c.benchmark_group("average_precision");
    for n in [100, 1_000, 10_000] {
        let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let positive: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        group.throughput(Throughput::Elements(n as u64));
        group.bench_function(BenchmarkId::from_parameter(n), |b| {
            b.iter(|| average_precision(&pr_curve("x", black_box(&scores), &positive).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, depthwise, attention, ap);
criterion_main!(benches);
