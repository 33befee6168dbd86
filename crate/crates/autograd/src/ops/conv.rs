//! 2-D convolution kernels: forward, input gradient, and weight gradient.
//!
//! All three are linear maps sharing one [`ConvGeom`]; each one's adjoints
//! are expressible with the other two, which is what lets the tape
//! differentiate through convolutions to any order. Everything lowers to
//! im2col + GEMM. Two execution paths exist, selected purely by geometry so
//! results never depend on the execution mode:
//!
//! * per-sample: one GEMM per batch element, parallelized over the batch;
//! * fused: when the output extent is small the per-sample GEMMs degenerate
//!   (skinny matrices repack the weight matrix per sample), so the batch is
//!   gathered into one wide GEMM instead.

use crate::par;
use crate::scalar::Scalar;
use crate::Data;
use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2, IxDyn};

/// Below this many output positions per sample, use the fused-batch path.
const FUSE_COLS_BELOW: usize = 256;

/// Static geometry of a convolution. `oh`/`ow` are derived from the input
/// extent, kernel, stride, and zero padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize, h: usize, w: usize) -> Self {
        assert!(h + 2 * pad >= kernel && w + 2 * pad >= kernel, "kernel larger than padded input");
        let oh = (h + 2 * pad - kernel) / stride + 1;
        let ow = (w + 2 * pad - kernel) / stride + 1;
        ConvGeom { in_ch, out_ch, kernel, stride, pad, h, w, oh, ow }
    }

    /// Rows of the im2col matrix: one per (input channel, kernel position).
    pub fn rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    /// Columns of the im2col matrix per sample: one per output position.
    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn in_stride(&self) -> usize {
        self.in_ch * self.h * self.w
    }

    fn out_stride(&self) -> usize {
        self.out_ch * self.oh * self.ow
    }

    fn fused(&self) -> bool {
        self.cols() < FUSE_COLS_BELOW
    }

    /// Range of output columns `oj` for which `oj*stride + kj - pad` lands
    /// inside `[0, w)`. Pure integer arithmetic with floor semantics (plain
    /// `/` truncates toward zero, which is wrong for negative numerators).
    fn valid_oj(&self, kj: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kj as isize - self.pad as isize;
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let num = self.w as isize - 1 - off;
        let hi = if num < 0 { 0 } else { num / s + 1 };
        let lo = lo.clamp(0, self.ow as isize) as usize;
        let hi = hi.clamp(0, self.ow as isize) as usize;
        (lo, hi.max(lo))
    }
}

/// Expand one input sample into im2col form. Row `r` of the matrix starts at
/// `dst[r * row_stride + col_off]`; every addressed element is written
/// (padding positions become zero), so the destination needs no pre-fill.
fn im2col<T: Scalar>(x: &[T], dst: &mut [T], row_stride: usize, col_off: usize, g: &ConvGeom) {
    let (kh, kw, s, p) = (g.kernel, g.kernel, g.stride, g.pad);
    for c in 0..g.in_ch {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let dst_base = row * row_stride + col_off;
                let (oj_lo, oj_hi) = g.valid_oj(kj);
                for oi in 0..g.oh {
                    let ii = (oi * s + ki) as isize - p as isize;
                    let out = &mut dst[dst_base + oi * g.ow..dst_base + (oi + 1) * g.ow];
                    if ii < 0 || ii >= g.h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    out[..oj_lo].fill(T::zero());
                    out[oj_hi..].fill(T::zero());
                    if s == 1 {
                        let j0 = (oj_lo + kj) - p;
                        out[oj_lo..oj_hi].copy_from_slice(&src_row[j0..j0 + (oj_hi - oj_lo)]);
                    } else {
                        for oj in oj_lo..oj_hi {
                            let jj = oj * s + kj - p;
                            out[oj] = src_row[jj];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add im2col form back onto one input sample. Adjoint of
/// [`im2col`]; iteration order is fixed, so accumulation is deterministic.
fn col2im_add<T: Scalar>(src: &[T], x: &mut [T], row_stride: usize, col_off: usize, g: &ConvGeom) {
    let (kh, kw, s, p) = (g.kernel, g.kernel, g.stride, g.pad);
    for c in 0..g.in_ch {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src_base = row * row_stride + col_off;
                let (oj_lo, oj_hi) = g.valid_oj(kj);
                for oi in 0..g.oh {
                    let ii = (oi * s + ki) as isize - p as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let cols_row = &src[src_base + oi * g.ow..src_base + (oi + 1) * g.ow];
                    let dst_row = &mut plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for oj in oj_lo..oj_hi {
                        let jj = oj * s + kj - p;
                        dst_row[jj] = dst_row[jj] + cols_row[oj];
                    }
                }
            }
        }
    }
}

/// `x (B, in, h, w) * w (out, in, k, k) -> (B, out, oh, ow)`
pub fn conv_fwd<T: Scalar>(x: &Data<T>, w: &Data<T>, g: &ConvGeom) -> Data<T> {
    let b = x.shape()[0];
    debug_assert_eq!(x.shape(), &[b, g.in_ch, g.h, g.w]);
    debug_assert_eq!(w.shape(), &[g.out_ch, g.in_ch, g.kernel, g.kernel]);
    let (rows, l) = (g.rows(), g.cols());
    let w2 = w.to_shape((g.out_ch, rows)).expect("weights are contiguous");
    let x_sl = x.as_slice().expect("standard layout");
    let mut out = Data::zeros(IxDyn(&[b, g.out_ch, g.oh, g.ow]));
    if g.fused() {
        let wide = b * l;
        let mut cols = vec![T::zero(); rows * wide];
        for bi in 0..b {
            im2col(&x_sl[bi * g.in_stride()..(bi + 1) * g.in_stride()], &mut cols, wide, bi * l, g);
        }
        let cols_v = ArrayView2::from_shape((rows, wide), &cols).unwrap();
        let mut y = Array2::<T>::zeros((g.out_ch, wide));
        general_mat_mul(T::one(), &w2, &cols_v, T::zero(), &mut y.view_mut());
        let y_sl = y.as_slice().unwrap();
        let out_sl = out.as_slice_mut().unwrap();
        for bi in 0..b {
            for oc in 0..g.out_ch {
                let dst = &mut out_sl[(bi * g.out_ch + oc) * l..(bi * g.out_ch + oc + 1) * l];
                dst.copy_from_slice(&y_sl[oc * wide + bi * l..oc * wide + (bi + 1) * l]);
            }
        }
    } else {
        let out_stride = g.out_stride();
        par::for_each_samples(out.as_slice_mut().unwrap(), out_stride, |bi, out_s| {
            let mut cols = vec![T::zero(); rows * l];
            im2col(&x_sl[bi * g.in_stride()..(bi + 1) * g.in_stride()], &mut cols, l, 0, g);
            let cols_v = ArrayView2::from_shape((rows, l), &cols).unwrap();
            let mut out_v = ArrayViewMut2::from_shape((g.out_ch, l), out_s).unwrap();
            general_mat_mul(T::one(), &w2, &cols_v, T::zero(), &mut out_v);
        });
    }
    out
}

/// `z (B, out, oh, ow) * w (out, in, k, k) -> (B, in, h, w)`; adjoint of
/// [`conv_fwd`] in its first argument. Also serves as the forward pass of
/// transposed convolution.
pub fn conv_igrad<T: Scalar>(z: &Data<T>, w: &Data<T>, g: &ConvGeom) -> Data<T> {
    let b = z.shape()[0];
    debug_assert_eq!(z.shape(), &[b, g.out_ch, g.oh, g.ow]);
    let (rows, l) = (g.rows(), g.cols());
    let w2 = w.to_shape((g.out_ch, rows)).expect("weights are contiguous");
    let z_sl = z.as_slice().expect("standard layout");
    let mut out = Data::zeros(IxDyn(&[b, g.in_ch, g.h, g.w]));
    if g.fused() {
        let wide = b * l;
        let mut z_all = vec![T::zero(); g.out_ch * wide];
        for bi in 0..b {
            for oc in 0..g.out_ch {
                z_all[oc * wide + bi * l..oc * wide + (bi + 1) * l]
                    .copy_from_slice(&z_sl[(bi * g.out_ch + oc) * l..(bi * g.out_ch + oc + 1) * l]);
            }
        }
        let z_v = ArrayView2::from_shape((g.out_ch, wide), &z_all).unwrap();
        let mut cols = Array2::<T>::zeros((rows, wide));
        general_mat_mul(T::one(), &w2.t(), &z_v, T::zero(), &mut cols.view_mut());
        let cols_sl = cols.as_slice().unwrap();
        let out_sl = out.as_slice_mut().unwrap();
        for bi in 0..b {
            col2im_add(cols_sl, &mut out_sl[bi * g.in_stride()..(bi + 1) * g.in_stride()], wide, bi * l, g);
        }
    } else {
        let in_stride = g.in_stride();
        par::for_each_samples(out.as_slice_mut().unwrap(), in_stride, |bi, out_s| {
            let z_v =
                ArrayView2::from_shape((g.out_ch, l), &z_sl[bi * g.out_stride()..(bi + 1) * g.out_stride()]).unwrap();
            let mut cols = Array2::<T>::zeros((rows, l));
            general_mat_mul(T::one(), &w2.t(), &z_v, T::zero(), &mut cols.view_mut());
            col2im_add(cols.as_slice().unwrap(), out_s, l, 0, g);
        });
    }
    out
}

/// `x (B, in, h, w) * z (B, out, oh, ow) -> (out, in, k, k)`; adjoint of
/// [`conv_fwd`] in its weight argument. Reduction over the batch happens in
/// a fixed order regardless of execution mode.
pub fn conv_wgrad<T: Scalar>(x: &Data<T>, z: &Data<T>, g: &ConvGeom) -> Data<T> {
    let b = x.shape()[0];
    debug_assert_eq!(x.shape(), &[b, g.in_ch, g.h, g.w]);
    debug_assert_eq!(z.shape(), &[b, g.out_ch, g.oh, g.ow]);
    let (rows, l) = (g.rows(), g.cols());
    let x_sl = x.as_slice().expect("standard layout");
    let z_sl = z.as_slice().expect("standard layout");
    let acc: Array2<T> = if g.fused() {
        let wide = b * l;
        let mut cols = vec![T::zero(); rows * wide];
        let mut z_all = vec![T::zero(); g.out_ch * wide];
        for bi in 0..b {
            im2col(&x_sl[bi * g.in_stride()..(bi + 1) * g.in_stride()], &mut cols, wide, bi * l, g);
            for oc in 0..g.out_ch {
                z_all[oc * wide + bi * l..oc * wide + (bi + 1) * l]
                    .copy_from_slice(&z_sl[(bi * g.out_ch + oc) * l..(bi * g.out_ch + oc + 1) * l]);
            }
        }
        let cols_v = ArrayView2::from_shape((rows, wide), &cols).unwrap();
        let z_v = ArrayView2::from_shape((g.out_ch, wide), &z_all).unwrap();
        let mut acc = Array2::<T>::zeros((g.out_ch, rows));
        general_mat_mul(T::one(), &z_v, &cols_v.t(), T::zero(), &mut acc.view_mut());
        acc
    } else {
        let mut partials: Vec<Array2<T>> = (0..b).map(|_| Array2::zeros((g.out_ch, rows))).collect();
        {
            let slots: Vec<(usize, &mut Array2<T>)> = partials.iter_mut().enumerate().collect();
            par::for_each_slots(slots, |bi, partial| {
                let mut cols = vec![T::zero(); rows * l];
                im2col(&x_sl[bi * g.in_stride()..(bi + 1) * g.in_stride()], &mut cols, l, 0, g);
                let cols_v = ArrayView2::from_shape((rows, l), &cols).unwrap();
                let z_v = ArrayView2::from_shape((g.out_ch, l), &z_sl[bi * g.out_stride()..(bi + 1) * g.out_stride()])
                    .unwrap();
                general_mat_mul(T::one(), &z_v, &cols_v.t(), T::zero(), &mut partial.view_mut());
            });
        }
        let mut acc = Array2::<T>::zeros((g.out_ch, rows));
        for p in partials {
            acc = acc + p;
        }
        acc
    };
    acc.into_shape_with_order(IxDyn(&[g.out_ch, g.in_ch, g.kernel, g.kernel])).unwrap()
}
