//! Corner-aligned bilinear resampling shared by map upsampling, crop
//! resizing and input preprocessing.
//!
//! Destination index `i` samples source coordinate `i · (src − 1) / (dst − 1)`,
//! so the four corners of the source land exactly on the four corners of the
//! destination. A length-1 destination samples the source centre.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};

#[inline]
fn source_coord(i: usize, src_len: usize, dst_len: usize) -> f64 {
    if src_len == 1 {
        0.0
    } else if dst_len == 1 {
        (src_len - 1) as f64 / 2.0
    } else {
        (i * (src_len - 1)) as f64 / (dst_len - 1) as f64
    }
}

/// Interpolation taps for one axis: (lower index, upper index, upper weight).
fn taps(src_len: usize, dst_len: usize) -> Vec<(usize, usize, f64)> {
    (0..dst_len)
        .map(|i| {
            let s = source_coord(i, src_len, dst_len);
            let lo = (s.floor() as usize).min(src_len - 1);
            let hi = (lo + 1).min(src_len - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

/// Bilinear resize of a single plane to `(height, width)`.
///
/// Panics if either target dimension or the source is empty.
pub fn resize_bilinear(src: ArrayView2<f64>, (height, width): (usize, usize)) -> Array2<f64> {
    let (sh, sw) = src.dim();
    assert!(sh > 0 && sw > 0 && height > 0 && width > 0, "empty resize");
    if (sh, sw) == (height, width) {
        return src.to_owned();
    }
    let rows = taps(sh, height);
    let cols = taps(sw, width);
    let mut out = Array2::<f64>::zeros((height, width));
    for (y, &(r0, r1, fy)) in rows.iter().enumerate() {
        for (x, &(c0, c1, fx)) in cols.iter().enumerate() {
            let top = src[[r0, c0]] * (1.0 - fx) + src[[r0, c1]] * fx;
            let bottom = src[[r1, c0]] * (1.0 - fx) + src[[r1, c1]] * fx;
            out[[y, x]] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

/// Channel-wise resize of a `(C, H, W)` image.
pub fn resize_channels(src: ArrayView3<f64>, size: (usize, usize)) -> Array3<f64> {
    let c = src.len_of(Axis(0));
    let mut out = Array3::<f64>::zeros((c, size.0, size.1));
    for (plane, mut dst) in src.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        dst.assign(&resize_bilinear(plane, size));
    }
    out
}
