//! Data-parallel execution facade.
//!
//! All kernels split work along fixed boundaries (a constant chunk length,
//! or one batch sample per task) that do not depend on the number of worker
//! threads. Each output element is produced by exactly one sequential task,
//! so toggling parallelism cannot change results — `parallel` and sequential
//! runs are bit-identical. The `force_sequential` switch exists so benches
//! and equivalence tests can compare both modes inside one binary.

use num_traits::Zero;
use std::ops::Range;
use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Elementwise kernels process this many elements per task.
pub const CHUNK: usize = 1 << 14;

/// Work smaller than this runs inline even in parallel mode.
const MIN_PAR_LEN: usize = 1 << 12;

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Runtime override used by benches and tests to compare execution modes.
pub fn force_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::SeqCst);
}

/// True when work may actually be distributed across threads.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::SeqCst)
}

/// Runs `f(task_index)` for every index in `0..n`, possibly in parallel.
pub fn for_each_task<F>(n: usize, f: F)
where
    F: Fn(usize) + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if is_parallel() && n > 1 {
        (0..n).into_par_iter().for_each(f);
        return;
    }
    for i in 0..n {
        f(i);
    }
}

/// Splits `data` into consecutive `stride`-sized chunks (one per sample or
/// plane) and runs `f(chunk_index, chunk)`.
pub fn for_each_samples<T, F>(data: &mut [T], stride: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if is_parallel() && data.len() > stride {
        data.par_chunks_mut(stride).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in data.chunks_mut(stride).enumerate() {
        f(i, c);
    }
}

/// Runs `f` once per pre-built `(index, slot)` pair.
pub fn for_each_slots<S, F>(slots: Vec<(usize, S)>, f: F)
where
    S: Send,
    F: Fn(usize, S) + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if is_parallel() && slots.len() > 1 {
        slots.into_par_iter().for_each(|(i, s)| f(i, s));
        return;
    }
    for (i, s) in slots {
        f(i, s);
    }
}

/// Apply `f` elementwise to `a`, writing a fresh vector.
pub fn map1<T, F>(a: &[T], f: F) -> Vec<T>
where
    T: Copy + Send + Sync + Zero,
    F: Fn(T) -> T + Send + Sync,
{
    let mut out = vec![T::zero(); a.len()];
    fill_chunks(a.len(), &mut out, |range, dst| {
        for (d, &s) in dst.iter_mut().zip(&a[range]) {
            *d = f(s);
        }
    });
    out
}

/// Apply `f` elementwise to aligned slices `a` and `b`.
pub fn map2<T, F>(a: &[T], b: &[T], f: F) -> Vec<T>
where
    T: Copy + Send + Sync + Zero,
    F: Fn(T, T) -> T + Send + Sync,
{
    assert_eq!(a.len(), b.len(), "elementwise operands must match");
    let mut out = vec![T::zero(); a.len()];
    fill_chunks(a.len(), &mut out, |range, dst| {
        let (sa, sb) = (&a[range.clone()], &b[range]);
        for ((d, &x), &y) in dst.iter_mut().zip(sa).zip(sb) {
            *d = f(x, y);
        }
    });
    out
}

/// Deterministic full reduction: fixed-size chunk partials summed in order.
/// The same chunking is used in both modes, so the result is bit-stable.
pub fn sum_all<T>(a: &[T]) -> T
where
    T: Copy + Send + Sync + Zero + std::ops::Add<Output = T>,
{
    let partial = |r: Range<usize>| {
        let mut acc = T::zero();
        for &x in &a[r] {
            acc = acc + x;
        }
        acc
    };
    let ranges: Vec<Range<usize>> = chunk_ranges(a.len()).collect();
    let parts: Vec<T> = {
        #[cfg(feature = "parallel")]
        {
            if is_parallel() && a.len() > MIN_PAR_LEN {
                ranges.into_par_iter().map(partial).collect()
            } else {
                ranges.into_iter().map(partial).collect()
            }
        }
        #[cfg(not(feature = "parallel"))]
        {
            ranges.into_iter().map(partial).collect()
        }
    };
    let mut total = T::zero();
    for p in parts {
        total = total + p;
    }
    total
}

fn chunk_ranges(len: usize) -> impl Iterator<Item = Range<usize>> {
    (0..len.div_ceil(CHUNK)).map(move |i| i * CHUNK..((i + 1) * CHUNK).min(len))
}

fn fill_chunks<T, F>(len: usize, out: &mut [T], f: F)
where
    T: Send,
    F: Fn(Range<usize>, &mut [T]) + Send + Sync,
{
    if len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if is_parallel() && len > MIN_PAR_LEN {
        out.par_chunks_mut(CHUNK).enumerate().for_each(|(i, dst)| {
            let start = i * CHUNK;
            f(start..start + dst.len(), dst);
        });
        return;
    }
    for (i, dst) in out.chunks_mut(CHUNK).enumerate() {
        let start = i * CHUNK;
        f(start..start + dst.len(), dst);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_and_sum_match_sequential_reference() {
        let a: Vec<f64> = (0..100_000).map(|i| (i as f64) * 0.25 - 7.0).collect();
        let b: Vec<f64> = (0..100_000).map(|i| (i as f64).sin()).collect();

        let parallel_map = map2(&a, &b, |x, y| x * y + 1.0);
        let parallel_sum = sum_all(&a);
        force_sequential(true);
        let sequential_map = map2(&a, &b, |x, y| x * y + 1.0);
        let sequential_sum = sum_all(&a);
        force_sequential(false);

        assert_eq!(parallel_map, sequential_map);
        assert_eq!(parallel_sum.to_bits(), sequential_sum.to_bits());
    }
}
