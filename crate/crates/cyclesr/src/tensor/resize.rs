//! Image resampling: differentiable bilinear (align-corners=false) and
//! Catmull-Rom bicubic (a = -0.5, edge clamp, antialiased when minifying).

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Output length for a rational scale `num/den`, rounded half-up.
pub fn scaled_len(len: usize, num: u32, den: u32) -> Result<usize> {
    if num == 0 || den == 0 {
        return Err(Error::invalid("scale must be positive"));
    }
    let out = ((len as u64 * num as u64) as f64 / den as f64 + 0.5).floor() as usize;
    if out == 0 {
        return Err(Error::shape(format!(
            "degenerate output size for {len} scaled by {num}/{den}"
        )));
    }
    Ok(out)
}

#[inline]
fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Bilinear sampling positions for one axis: for each output index, the left
/// source index and the right-tap weight.
fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let ratio = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| {
            let sx = (d as f64 + 0.5) * ratio - 0.5;
            let i0 = sx.floor();
            let frac = sx - i0;
            let a = clamp_idx(i0 as isize, in_len);
            let b = clamp_idx(i0 as isize + 1, in_len);
            (a, b, frac)
        })
        .collect()
}

/// Differentiable bilinear resize (align-corners=false) of a BCHW tensor to
/// `(out_h, out_w)`.
pub fn bilinear_forward<T: Scalar>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = input.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("degenerate output size"));
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let src = input.data();
    let in_plane = h * w;
    let out_plane = out_h * out_w;
    let mut out = vec![T::zero(); b * c * out_plane];
    for (p, chunk) in out.chunks_mut(out_plane).enumerate() {
        let plane = &src[p * in_plane..][..in_plane];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let r0 = &plane[y0 * w..][..w];
            let r1 = &plane[y1 * w..][..w];
            let wy1 = T::cast_from(fy);
            let wy0 = T::one() - wy1;
            let orow = &mut chunk[oy * out_w..][..out_w];
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let wx1 = T::cast_from(fx);
                let wx0 = T::one() - wx1;
                orow[ox] = wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]);
            }
        }
    }
    Tensor::from_vec(&[b, c, out_h, out_w], out)
}

/// Scatter the output gradient back through [`bilinear_forward`].
pub fn bilinear_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor<T>> {
    let (b, c, oh, ow) = grad_out.dims4()?;
    let ty = bilinear_taps(in_h, oh);
    let tx = bilinear_taps(in_w, ow);
    let go = grad_out.data();
    let in_plane = in_h * in_w;
    let out_plane = oh * ow;
    let mut gi = vec![T::zero(); b * c * in_plane];
    for (p, chunk) in gi.chunks_mut(in_plane).enumerate() {
        let gplane = &go[p * out_plane..][..out_plane];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let wy1 = T::cast_from(fy);
            let wy0 = T::one() - wy1;
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = gplane[oy * ow + ox];
                let wx1 = T::cast_from(fx);
                let wx0 = T::one() - wx1;
                chunk[y0 * in_w + x0] += g * wy0 * wx0;
                chunk[y0 * in_w + x1] += g * wy0 * wx1;
                chunk[y1 * in_w + x0] += g * wy1 * wx0;
                chunk[y1 * in_w + x1] += g * wy1 * wx1;
            }
        }
    }
    Tensor::from_vec(&[b, c, in_h, in_w], gi)
}

/// Catmull-Rom kernel, a = -0.5.
fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * t * t * t - 5.0 * A * t * t + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

/// Tap plan for one axis of a bicubic resample. When minifying, the kernel is
/// stretched by the reduction ratio (antialiasing); weights are normalized so
/// they always sum to 1 (constants are preserved exactly).
fn bicubic_taps(in_len: usize, out_len: usize) -> Vec<(usize, Vec<f64>)> {
    let ratio = in_len as f64 / out_len as f64;
    let support_scale = ratio.max(1.0);
    let radius = 2.0 * support_scale;
    (0..out_len)
        .map(|d| {
            let sx = (d as f64 + 0.5) * ratio - 0.5;
            let lo = (sx - radius).floor() as isize + 1;
            let hi = (sx + radius).floor() as isize;
            let mut idx_lo = lo;
            let mut weights = Vec::with_capacity((hi - lo + 1) as usize);
            let mut sum = 0.0;
            for i in lo..=hi {
                let w = cubic_weight((i as f64 - sx) / support_scale);
                weights.push(w);
                sum += w;
            }
            for w in &mut weights {
                *w /= sum;
            }
            // trim zero-weight edge taps
            while weights.first() == Some(&0.0) {
                weights.remove(0);
                idx_lo += 1;
            }
            while weights.last() == Some(&0.0) {
                weights.pop();
            }
            (idx_lo.max(0) as usize, weights_with_clamp(idx_lo, &weights, in_len))
        })
        .collect()
}

/// Fold edge-clamped taps into in-range weights: taps below 0 accumulate on
/// index 0, taps at or above `n` accumulate on `n-1`.
fn weights_with_clamp(idx_lo: isize, weights: &[f64], n: usize) -> Vec<f64> {
    let first = idx_lo.max(0) as usize;
    let last_tap = idx_lo + weights.len() as isize - 1;
    let last = (last_tap.min(n as isize - 1)).max(0) as usize;
    let mut folded = vec![0.0; last - first + 1];
    for (off, &w) in weights.iter().enumerate() {
        let i = clamp_idx(idx_lo + off as isize, n);
        folded[i - first] += w;
    }
    folded
}

fn resample_axis(src: &[f64], taps: &[(usize, Vec<f64>)]) -> Vec<f64> {
    taps.iter()
        .map(|(start, ws)| {
            ws.iter()
                .enumerate()
                .map(|(off, &w)| w * src[start + off])
                .sum()
        })
        .collect()
}

/// Non-differentiable bicubic resample of a BCHW tensor to `(out_h, out_w)`.
/// Separable: rows first, then columns; computed in f64.
pub fn bicubic_resample<T: Scalar>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = input.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("degenerate output size"));
    }
    let tx = bicubic_taps(w, out_w);
    let ty = bicubic_taps(h, out_h);
    let src = input.data();
    let in_plane = h * w;
    let out_plane = out_h * out_w;
    let mut out = vec![T::zero(); b * c * out_plane];
    let mut row = vec![0.0f64; w];
    let mut mid = vec![0.0f64; h * out_w];
    let mut col = vec![0.0f64; h];
    for (p, chunk) in out.chunks_mut(out_plane).enumerate() {
        let plane = &src[p * in_plane..][..in_plane];
        for y in 0..h {
            for x in 0..w {
                row[x] = plane[y * w + x].cast_f64();
            }
            let r = resample_axis(&row, &tx);
            mid[y * out_w..(y + 1) * out_w].copy_from_slice(&r);
        }
        for x in 0..out_w {
            for y in 0..h {
                col[y] = mid[y * out_w + x];
            }
            let cvals = resample_axis(&col, &ty);
            for (y, v) in cvals.iter().enumerate() {
                chunk[y * out_w + x] = T::cast_from(*v);
            }
        }
    }
    Tensor::from_vec(&[b, c, out_h, out_w], out)
}

/// Bicubic resample by a rational scale factor applied to both axes.
pub fn bicubic_scale<T: Scalar>(input: &Tensor<T>, num: u32, den: u32) -> Result<Tensor<T>> {
    let (_, _, h, w) = input.dims4()?;
    let oh = scaled_len(h, num, den)?;
    let ow = scaled_len(w, num, den)?;
    bicubic_resample(input, oh, ow)
}
