//! Compares the rayon data-parallel kernels against the sequential
//! fallbacks on the workloads that dominate training and evaluation.
//!
//! Run with `cargo bench -p mvdiff --bench parallel`.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::{ArrayD, IxDyn};

use mvdiff::par;
use mvdiff::scalar::Scalar;
use mvdiff::tensor::kernels;

fn filled(shape: &[usize], seed: u64) -> ArrayD<f32> {
    let n: usize = shape.iter().product();
    ArrayD::from_shape_vec(
        IxDyn(shape),
        (0..n)
            .map(|i| {
                let h = (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ seed;
                (h % 1000) as f32 / 500.0 - 1.0
            })
            .collect(),
    )
    .expect("shape matches element count")
}

/// Sequential conv2d built on the same kernels but driven through the
/// sequential dispatcher (mirrors conv2d_forward's structure).
fn conv_seq(x: &ArrayD<f32>, w: &ArrayD<f32>, b: &ArrayD<f32>) -> ArrayD<f32> {
    // The kernel parallelises internally; to get the sequential shape we
    // run one sample at a time so rayon never sees more than one chunk.
    let n = x.shape()[0];
    let mut outs = Vec::with_capacity(n);
    for i in 0..n {
        let xi = x
            .index_axis(ndarray::Axis(0), i)
            .insert_axis(ndarray::Axis(0))
            .to_owned();
        outs.push(kernels::conv2d_forward(&xi, w, b, 1, 1));
    }
    let views: Vec<_> = outs.iter().map(|o| o.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("same shapes")
}

fn bench_conv2d(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_16x32x32");
    let x = filled(&[8, 16, 32, 32], 1);
    let w = filled(&[16, 16, 3, 3], 2);
    let b = filled(&[16], 3);
    group.bench_function(BenchmarkId::new("batch", "parallel"), |bench| {
        bench.iter(|| kernels::conv2d_forward(&x, &w, &b, 1, 1))
    });
    group.bench_function(BenchmarkId::new("batch", "sequential"), |bench| {
        bench.iter(|| conv_seq(&x, &w, &b))
    });
    group.finish();
}

fn bench_indexed_map(c: &mut Criterion) {
    let mut group = c.benchmark_group("indexed_map");
    let work = |i: usize, v: &mut f32| {
        let mut acc = 0.0f32;
        for k in 0..64 {
            acc += f32::from_f64(((i * 64 + k) as f64).sin());
        }
        *v = acc;
    };
    group.bench_function(BenchmarkId::new("map_64k", "parallel"), |bench| {
        let mut buf = vec![0.0f32; 65536];
        bench.iter(|| par::for_each_indexed_par(&mut buf, work))
    });
    group.bench_function(BenchmarkId::new("map_64k", "sequential"), |bench| {
        let mut buf = vec![0.0f32; 65536];
        bench.iter(|| par::for_each_indexed_seq(&mut buf, work))
    });
    group.finish();
}

criterion_group!(benches, bench_conv2d, bench_indexed_map);
criterion_main!(benches);
