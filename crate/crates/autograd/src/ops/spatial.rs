//! Structural array ops: reflection padding and channel slice/embed.
//!
//! Each op and its adjoint form a closed pair (the adjoint of a gather is
//! the matching scatter-add and vice versa), so these stay differentiable
//! to any order without extra rules.

use crate::par;
use crate::scalar::Scalar;
use crate::Data;
use ndarray::IxDyn;

/// Mirror an index into `[0, n)` without repeating the edge sample.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if i < 0 {
        (-i) as usize
    } else if i as usize >= n {
        2 * n - 2 - i as usize
    } else {
        i as usize
    }
}

/// `(B, C, H, W) -> (B, C, H+2p, W+2p)` with mirrored borders.
pub fn pad_reflect<T: Scalar>(x: &Data<T>, pad: usize) -> Data<T> {
    let (b, c, h, w) = dims4(x);
    assert!(pad < h && pad < w, "reflection pad must be smaller than the spatial extent");
    let (ho, wo) = (h + 2 * pad, w + 2 * pad);
    let x_sl = x.as_slice().expect("standard layout");
    let mut out = Data::zeros(IxDyn(&[b, c, ho, wo]));
    par::for_each_samples(out.as_slice_mut().unwrap(), ho * wo, |plane_idx, out_plane| {
        let src = &x_sl[plane_idx * h * w..(plane_idx + 1) * h * w];
        for io in 0..ho {
            let ii = reflect(io as isize - pad as isize, h);
            let row = &mut out_plane[io * wo..(io + 1) * wo];
            for (jo, v) in row.iter_mut().enumerate() {
                let jj = reflect(jo as isize - pad as isize, w);
                *v = src[ii * w + jj];
            }
        }
    });
    out
}

/// Adjoint of [`pad_reflect`]: folds mirrored border gradients back onto
/// their source pixels.
pub fn pad_reflect_adj<T: Scalar>(gy: &Data<T>, pad: usize) -> Data<T> {
    let (b, c, ho, wo) = dims4(gy);
    let (h, w) = (ho - 2 * pad, wo - 2 * pad);
    let gy_sl = gy.as_slice().expect("standard layout");
    let mut out = Data::zeros(IxDyn(&[b, c, h, w]));
    par::for_each_samples(out.as_slice_mut().unwrap(), h * w, |plane_idx, out_plane| {
        let src = &gy_sl[plane_idx * ho * wo..(plane_idx + 1) * ho * wo];
        for io in 0..ho {
            let ii = reflect(io as isize - pad as isize, h);
            for jo in 0..wo {
                let jj = reflect(jo as isize - pad as isize, w);
                out_plane[ii * w + jj] = out_plane[ii * w + jj] + src[io * wo + jo];
            }
        }
    });
    out
}

/// Copy channels `c0..c0+len` of every sample: `(B, C, H, W) -> (B, len, H, W)`.
pub fn channel_slice<T: Scalar>(x: &Data<T>, c0: usize, len: usize) -> Data<T> {
    let (b, c, h, w) = dims4(x);
    assert!(c0 + len <= c, "channel slice out of range");
    let plane = h * w;
    let x_sl = x.as_slice().expect("standard layout");
    let mut out = Data::zeros(IxDyn(&[b, len, h, w]));
    par::for_each_samples(out.as_slice_mut().unwrap(), len * plane, |bi, out_s| {
        let src = &x_sl[bi * c * plane + c0 * plane..bi * c * plane + (c0 + len) * plane];
        out_s.copy_from_slice(src);
    });
    out
}

/// Embed all channels of `x` at offset `c0` inside `total` zero channels:
/// `(B, len, H, W) -> (B, total, H, W)`. Adjoint of [`channel_slice`].
pub fn channel_embed<T: Scalar>(x: &Data<T>, c0: usize, total: usize) -> Data<T> {
    let (b, len, h, w) = dims4(x);
    assert!(c0 + len <= total, "channel embed out of range");
    let plane = h * w;
    let x_sl = x.as_slice().expect("standard layout");
    let mut out = Data::zeros(IxDyn(&[b, total, h, w]));
    par::for_each_samples(out.as_slice_mut().unwrap(), total * plane, |bi, out_s| {
        let src = &x_sl[bi * len * plane..(bi + 1) * len * plane];
        out_s[c0 * plane..(c0 + len) * plane].copy_from_slice(src);
    });
    out
}

fn dims4<T: Scalar>(x: &Data<T>) -> (usize, usize, usize, usize) {
    let s = x.shape();
    assert_eq!(s.len(), 4, "expected a rank-4 array, got shape {s:?}");
    (s[0], s[1], s[2], s[3])
}
