//! Compares the rayon data-parallel kernels against the sequential
//! fallback on convolution-sized workloads.
//!
//! Run with `cargo bench -p emogan-autograd`. Both modes execute the exact
//! same arithmetic per element (results are bit-identical); the comparison
//! is purely about wall time.

use criterion::{criterion_group, criterion_main, Criterion};
use emogan_autograd::ops::conv::{conv_fwd, conv_igrad, conv_wgrad};
use emogan_autograd::ops::ConvGeom;
use emogan_autograd::{par, Data};
use ndarray::IxDyn;
use std::hint::black_box;

fn filled(shape: &[usize]) -> Data<f32> {
    let mut v = 0.05f32;
    Data::from_shape_fn(IxDyn(shape), |_| {
        v = (v * 1.13 + 0.31) % 1.0 - 0.5;
        v
    })
}

fn bench_modes<F: FnMut()>(c: &mut Criterion, name: &str, mut f: F) {
    let mut group = c.benchmark_group(name);
    group.bench_function("parallel", |b| {
        par::force_sequential(false);
        b.iter(&mut f);
    });
    group.bench_function("sequential", |b| {
        par::force_sequential(true);
        b.iter(&mut f);
    });
    par::force_sequential(false);
    group.finish();
}

fn conv_benches(c: &mut Criterion) {
    let geom = ConvGeom::new(64, 128, 4, 2, 1, 32, 32);
    let x = filled(&[8, 64, 32, 32]);
    let w = filled(&[128, 64, 4, 4]);
    let z = filled(&[8, 128, geom.oh, geom.ow]);

    bench_modes(c, "conv_fwd_64x128_32px_b8", || {
        black_box(conv_fwd(black_box(&x), black_box(&w), &geom));
    });
    bench_modes(c, "conv_igrad_64x128_32px_b8", || {
        black_box(conv_igrad(black_box(&z), black_box(&w), &geom));
    });
    bench_modes(c, "conv_wgrad_64x128_32px_b8", || {
        black_box(conv_wgrad(black_box(&x), black_box(&z), &geom));
    });
}

fn elementwise_benches(c: &mut Criterion) {
    let a: Vec<f32> = (0..1 << 20).map(|i| (i as f32).sin()).collect();
    let b: Vec<f32> = (0..1 << 20).map(|i| (i as f32).cos()).collect();
    bench_modes(c, "map2_mul_add_1m", || {
        black_box(par::map2(black_box(&a), black_box(&b), |x, y| x * y + 0.5));
    });
    bench_modes(c, "sum_all_1m", || {
        black_box(par::sum_all(black_box(&a)));
    });
}

criterion_group!(benches, conv_benches, elementwise_benches);
criterion_main!(benches);
