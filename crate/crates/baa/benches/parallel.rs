//! Parallel core vs sequential fallback.
//!
//! The `gemm` and `render` groups compare both paths in one build through
//! the `*_serial` twins. `embed_batch` exercises the whole forward pass and
//! follows the active feature set; run `cargo bench --no-default-features`
//! for its sequential numbers.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use baa::embednet::EmbedNet;
use baa::geometry::Intrinsics;
use baa::par;
use baa::synthworld::{generate_scene, render, sample_trajectory, DomainStyle};
use baa::tensor::linalg::{gemm_nn, gemm_nn_serial, gemm_nt, gemm_nt_serial};
use baa::tensor::Tensor;

fn rand_mat(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn bench_gemm(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("gemm");
    for &n in &[128usize, 256, 512] {
        let a = rand_mat(&mut rng, n * n);
        let b = rand_mat(&mut rng, n * n);
        let mut out = vec![0f32; n * n];
        group.bench_function(BenchmarkId::new("nn_parallel", n), |bench| {
            bench.iter(|| {
                out.fill(0.0);
                gemm_nn(&mut out, &a, &b, n, n, n);
            })
        });
        group.bench_function(BenchmarkId::new("nn_serial", n), |bench| {
            bench.iter(|| {
                out.fill(0.0);
                gemm_nn_serial(&mut out, &a, &b, n, n, n);
            })
        });
        group.bench_function(BenchmarkId::new("nt_parallel", n), |bench| {
            bench.iter(|| {
                out.fill(0.0);
                gemm_nt(&mut out, &a, &b, n, n, n);
            })
        });
        group.bench_function(BenchmarkId::new("nt_serial", n), |bench| {
            bench.iter(|| {
                out.fill(0.0);
                gemm_nt_serial(&mut out, &a, &b, n, n, n);
            })
        });
    }
    group.finish();
}

fn bench_render(c: &mut Criterion) {
    let scene = generate_scene(11, 10).expect("scene");
    let style = DomainStyle::source();
    let k = Intrinsics::square(32);
    let poses = sample_trajectory(&scene, 32, 12).expect("trajectory");

    let mut group = c.benchmark_group("render_batch");
    group.sample_size(20);
    group.bench_function("parallel", |bench| {
        bench.iter(|| {
            par::map_indexed(poses.len(), |i| {
                render(&scene, &style, &poses[i], &k).expect("render")
            })
        })
    });
    group.bench_function("serial", |bench| {
        bench.iter(|| {
            par::map_indexed_serial(poses.len(), |i| {
                render(&scene, &style, &poses[i], &k).expect("render")
            })
        })
    });
    group.finish();
}

fn bench_embed(c: &mut Criterion) {
    let net = EmbedNet::new(3, 32, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let images: Vec<Tensor<f32>> = (0..16)
        .map(|_| {
            let data: Vec<f32> = (0..32 * 32 * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
            Tensor::from_vec(&[32, 32, 3], data).expect("image")
        })
        .collect();
    let refs: Vec<&Tensor<f32>> = images.iter().collect();

    let mut group = c.benchmark_group("embed_batch");
    group.sample_size(20);
    group.bench_function("batch16", |bench| {
        bench.iter(|| net.embed_batch(&refs).expect("embed"))
    });
    group.finish();
}

criterion_group!(benches, bench_gemm, bench_render, bench_embed);
criterion_main!(benches);
