//! Convolution kernels (forward, transposed, and their gradients).
//!
//! All kernels are data-parallel over disjoint output planes, so results are
//! bitwise identical between the rayon path (feature `parallel`, default) and
//! the sequential fallback: every output element is produced by exactly one
//! task with a fixed inner summation order.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Run `body(plane_index, plane)` over equal-sized chunks of `out`.
fn for_each_plane<T, F>(parallel: bool, out: &mut [T], plane: usize, body: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    debug_assert_eq!(out.len() % plane, 0);
    #[cfg(feature = "parallel")]
    if parallel {
        out.par_chunks_mut(plane)
            .enumerate()
            .for_each(|(i, chunk)| body(i, chunk));
        return;
    }
    #[cfg(not(feature = "parallel"))]
    let _ = parallel;
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        body(i, chunk);
    }
}

pub(crate) fn default_parallel() -> bool {
    cfg!(feature = "parallel")
}

fn conv_out_len(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::invalid("stride must be positive"));
    }
    if input + 2 * pad < k {
        return Err(Error::shape(format!(
            "kernel {k} does not fit padded input {input}+2*{pad}"
        )));
    }
    Ok((input + 2 * pad - k) / stride + 1)
}

pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn conv_dims<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvDims> {
    let (batch, c_in, in_h, in_w) = input.dims4()?;
    let (c_out, w_cin, kh, kw) = weight.dims4()?;
    if kh != kw {
        return Err(Error::shape(format!("non-square kernel {kh}x{kw}")));
    }
    if w_cin != c_in {
        return Err(Error::shape(format!(
            "channel mismatch: input has {c_in}, weight expects {w_cin}"
        )));
    }
    Ok(ConvDims {
        batch,
        c_in,
        c_out,
        k: kh,
        in_h,
        in_w,
        out_h: conv_out_len(in_h, kh, stride, pad)?,
        out_w: conv_out_len(in_w, kw, stride, pad)?,
    })
}

/// Cross-correlation with zero padding. `input` BCHW, `weight` OIKK,
/// `bias` length O (optional).
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    conv2d_forward_impl(input, weight, bias, stride, pad, default_parallel())
}

/// Sequential variant of [`conv2d_forward`], exposed for parity tests and the
/// benchmark suite.
pub fn conv2d_forward_serial<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    conv2d_forward_impl(input, weight, bias, stride, pad, false)
}

fn conv2d_forward_impl<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    parallel: bool,
) -> Result<Tensor<T>> {
    let d = conv_dims(input, weight, stride, pad)?;
    if let Some(b) = bias {
        if b.numel() != d.c_out {
            return Err(Error::shape(format!(
                "bias length {} != output channels {}",
                b.numel(),
                d.c_out
            )));
        }
    }
    let in_plane = d.in_h * d.in_w;
    let out_plane = d.out_h * d.out_w;
    let x = input.data();
    let w = weight.data();
    let mut out = vec![T::zero(); d.batch * d.c_out * out_plane];

    for_each_plane(parallel, &mut out, out_plane, |p, acc| {
        let b = p / d.c_out;
        let co = p % d.c_out;
        for ci in 0..d.c_in {
            let plane = &x[(b * d.c_in + ci) * in_plane..][..in_plane];
            for ky in 0..d.k {
                for kx in 0..d.k {
                    let wv = w[((co * d.c_in + ci) * d.k + ky) * d.k + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    accumulate_corr(
                        acc, plane, wv, d.out_h, d.out_w, d.in_h, d.in_w, stride, pad, ky, kx,
                    );
                }
            }
        }
        if let Some(bt) = bias {
            let bv = bt.data()[co];
            if bv != T::zero() {
                for v in acc.iter_mut() {
                    *v += bv;
                }
            }
        }
    });

    Tensor::from_vec(&[d.batch, d.c_out, d.out_h, d.out_w], out)
}

/// acc[yo, xo] += wv * plane[yo*stride+ky-pad, xo*stride+kx-pad] over valid positions.
#[inline]
#[allow(clippy::too_many_arguments)]
fn accumulate_corr<T: Scalar>(
    acc: &mut [T],
    plane: &[T],
    wv: T,
    out_h: usize,
    out_w: usize,
    in_h: usize,
    in_w: usize,
    stride: usize,
    pad: usize,
    ky: usize,
    kx: usize,
) {
    // valid yo: 0 <= yo*stride + ky - pad < in_h
    let (yo_lo, yo_hi) = valid_range(out_h, in_h, stride, pad, ky);
    let (xo_lo, xo_hi) = valid_range(out_w, in_w, stride, pad, kx);
    if yo_lo >= yo_hi || xo_lo >= xo_hi {
        return;
    }
    for yo in yo_lo..yo_hi {
        let yi = yo * stride + ky - pad;
        let arow = &mut acc[yo * out_w + xo_lo..yo * out_w + xo_hi];
        if stride == 1 {
            let xi0 = xo_lo + kx - pad;
            let irow = &plane[yi * in_w + xi0..][..xo_hi - xo_lo];
            for (a, &v) in arow.iter_mut().zip(irow) {
                *a += wv * v;
            }
        } else {
            let mut xi = xo_lo * stride + kx - pad;
            for a in arow.iter_mut() {
                *a += wv * plane[yi * in_w + xi];
                xi += stride;
            }
        }
    }
}

/// Output index range `[lo, hi)` for which `o*stride + koff - pad` lands in `[0, in_len)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, pad: usize, koff: usize) -> (usize, usize) {
    let lo = if koff >= pad {
        0
    } else {
        (pad - koff).div_ceil(stride)
    };
    // o*stride <= in_len - 1 + pad - koff
    let hi = if in_len + pad > koff {
        (((in_len + pad - koff - 1) / stride) + 1).min(out_len)
    } else {
        0
    };
    (lo.min(out_len), hi)
}

/// Gradients of [`conv2d_forward`] w.r.t. (input, weight, bias). Each piece is
/// computed only when the matching flag is set.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>)> {
    let d = conv_dims(input, weight, stride, pad)?;
    let parallel = default_parallel();
    let out_plane = d.out_h * d.out_w;
    let in_plane = d.in_h * d.in_w;
    let go = grad_out.data();
    debug_assert_eq!(go.len(), d.batch * d.c_out * out_plane);

    let grad_input = if need_input {
        let w = weight.data();
        let mut gi = vec![T::zero(); d.batch * d.c_in * in_plane];
        for_each_plane(parallel, &mut gi, in_plane, |p, acc| {
            let b = p / d.c_in;
            let ci = p % d.c_in;
            for co in 0..d.c_out {
                let gplane = &go[(b * d.c_out + co) * out_plane..][..out_plane];
                for ky in 0..d.k {
                    for kx in 0..d.k {
                        let wv = w[((co * d.c_in + ci) * d.k + ky) * d.k + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        scatter_corr(
                            acc, gplane, wv, d.out_h, d.out_w, d.in_h, d.in_w, stride, pad, ky, kx,
                        );
                    }
                }
            }
        });
        Some(Tensor::from_vec(&[d.batch, d.c_in, d.in_h, d.in_w], gi)?)
    } else {
        None
    };

    let grad_weight = if need_weight {
        let x = input.data();
        let kk = d.k * d.k;
        let mut gw = vec![T::zero(); d.c_out * d.c_in * kk];
        for_each_plane(parallel, &mut gw, kk, |p, acc| {
            let co = p / d.c_in;
            let ci = p % d.c_in;
            for b in 0..d.batch {
                let gplane = &go[(b * d.c_out + co) * out_plane..][..out_plane];
                let xplane = &x[(b * d.c_in + ci) * in_plane..][..in_plane];
                for ky in 0..d.k {
                    for kx in 0..d.k {
                        acc[ky * d.k + kx] += window_dot(
                            gplane, xplane, d.out_h, d.out_w, d.in_h, d.in_w, stride, pad, ky, kx,
                        );
                    }
                }
            }
        });
        Some(Tensor::from_vec(&[d.c_out, d.c_in, d.k, d.k], gw)?)
    } else {
        None
    };

    let grad_bias = if need_bias {
        let mut gb = vec![T::zero(); d.c_out];
        for b in 0..d.batch {
            for (co, acc) in gb.iter_mut().enumerate() {
                let gplane = &go[(b * d.c_out + co) * out_plane..][..out_plane];
                *acc += gplane.iter().copied().sum();
            }
        }
        Some(Tensor::from_vec(&[d.c_out], gb)?)
    } else {
        None
    };

    Ok((grad_input, grad_weight, grad_bias))
}

/// acc[o*stride+k-pad] += wv * src[o] — the adjoint of [`accumulate_corr`].
#[inline]
#[allow(clippy::too_many_arguments)]
fn scatter_corr<T: Scalar>(
    acc: &mut [T],
    src: &[T],
    wv: T,
    out_h: usize,
    out_w: usize,
    in_h: usize,
    in_w: usize,
    stride: usize,
    pad: usize,
    ky: usize,
    kx: usize,
) {
    let (yo_lo, yo_hi) = valid_range(out_h, in_h, stride, pad, ky);
    let (xo_lo, xo_hi) = valid_range(out_w, in_w, stride, pad, kx);
    if yo_lo >= yo_hi || xo_lo >= xo_hi {
        return;
    }
    for yo in yo_lo..yo_hi {
        let yi = yo * stride + ky - pad;
        let srow = &src[yo * out_w + xo_lo..yo * out_w + xo_hi];
        if stride == 1 {
            let xi0 = xo_lo + kx - pad;
            let arow = &mut acc[yi * in_w + xi0..][..srow.len()];
            for (a, &v) in arow.iter_mut().zip(srow) {
                *a += wv * v;
            }
        } else {
            let mut xi = xo_lo * stride + kx - pad;
            for &v in srow {
                acc[yi * in_w + xi] += wv * v;
                xi += stride;
            }
        }
    }
}

/// Σ_o src[o] * plane[o*stride + k - pad] over the valid window.
#[inline]
#[allow(clippy::too_many_arguments)]
fn window_dot<T: Scalar>(
    src: &[T],
    plane: &[T],
    out_h: usize,
    out_w: usize,
    in_h: usize,
    in_w: usize,
    stride: usize,
    pad: usize,
    ky: usize,
    kx: usize,
) -> T {
    let (yo_lo, yo_hi) = valid_range(out_h, in_h, stride, pad, ky);
    let (xo_lo, xo_hi) = valid_range(out_w, in_w, stride, pad, kx);
    let mut acc = T::zero();
    if yo_lo >= yo_hi || xo_lo >= xo_hi {
        return acc;
    }
    for yo in yo_lo..yo_hi {
        let yi = yo * stride + ky - pad;
        let srow = &src[yo * out_w + xo_lo..yo * out_w + xo_hi];
        if stride == 1 {
            let xi0 = xo_lo + kx - pad;
            let irow = &plane[yi * in_w + xi0..][..srow.len()];
            for (&s, &v) in srow.iter().zip(irow) {
                acc += s * v;
            }
        } else {
            let mut xi = xo_lo * stride + kx - pad;
            for &s in srow {
                acc += s * plane[yi * in_w + xi];
                xi += stride;
            }
        }
    }
    acc
}

fn convt_out_len(input: usize, k: usize, stride: usize, pad: usize, out_pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::invalid("stride must be positive"));
    }
    if out_pad >= stride {
        return Err(Error::invalid("output padding must be < stride"));
    }
    let nominal = (input - 1) * stride + k + out_pad;
    if nominal < 2 * pad + 1 {
        return Err(Error::shape(format!(
            "transposed conv output degenerate: ({input}-1)*{stride}+{k}+{out_pad} <= 2*{pad}"
        )));
    }
    Ok(nominal - 2 * pad)
}

fn convt_dims<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Result<ConvDims> {
    let (batch, c_in, in_h, in_w) = input.dims4()?;
    let (w_cin, c_out, kh, kw) = weight.dims4()?;
    if kh != kw {
        return Err(Error::shape(format!("non-square kernel {kh}x{kw}")));
    }
    if w_cin != c_in {
        return Err(Error::shape(format!(
            "channel mismatch: input has {c_in}, weight expects {w_cin}"
        )));
    }
    Ok(ConvDims {
        batch,
        c_in,
        c_out,
        k: kh,
        in_h,
        in_w,
        out_h: convt_out_len(in_h, kh, stride, pad, out_pad)?,
        out_w: convt_out_len(in_w, kw, stride, pad, out_pad)?,
    })
}

/// Transposed convolution: the exact adjoint of [`conv2d_forward`] with the
/// same `weight` (viewed IOKK), `stride` and `pad`; `out_pad` disambiguates
/// the output size when `stride > 1`. Output size per axis:
/// `(in-1)*stride - 2*pad + k + out_pad`.
pub fn convt2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Result<Tensor<T>> {
    convt2d_forward_impl(input, weight, bias, stride, pad, out_pad, default_parallel())
}

/// Sequential variant of [`convt2d_forward`] for parity tests and benches.
pub fn convt2d_forward_serial<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Result<Tensor<T>> {
    convt2d_forward_impl(input, weight, bias, stride, pad, out_pad, false)
}

#[allow(clippy::too_many_arguments)]
fn convt2d_forward_impl<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    out_pad: usize,
    parallel: bool,
) -> Result<Tensor<T>> {
    let d = convt_dims(input, weight, stride, pad, out_pad)?;
    if let Some(b) = bias {
        if b.numel() != d.c_out {
            return Err(Error::shape(format!(
                "bias length {} != output channels {}",
                b.numel(),
                d.c_out
            )));
        }
    }
    let in_plane = d.in_h * d.in_w;
    let out_plane = d.out_h * d.out_w;
    let x = input.data();
    let w = weight.data();
    let mut out = vec![T::zero(); d.batch * d.c_out * out_plane];

    for_each_plane(parallel, &mut out, out_plane, |p, acc| {
        let b = p / d.c_out;
        let co = p % d.c_out;
        for ci in 0..d.c_in {
            let plane = &x[(b * d.c_in + ci) * in_plane..][..in_plane];
            for ky in 0..d.k {
                for kx in 0..d.k {
                    let wv = w[((ci * d.c_out + co) * d.k + ky) * d.k + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    // adjoint of accumulate_corr: roles of "in" and "out" swap
                    scatter_corr(
                        acc, plane, wv, d.in_h, d.in_w, d.out_h, d.out_w, stride, pad, ky, kx,
                    );
                }
            }
        }
        if let Some(bt) = bias {
            let bv = bt.data()[co];
            if bv != T::zero() {
                for v in acc.iter_mut() {
                    *v += bv;
                }
            }
        }
    });

    Tensor::from_vec(&[d.batch, d.c_out, d.out_h, d.out_w], out)
}

/// Gradients of [`convt2d_forward`] w.r.t. (input, weight, bias).
#[allow(clippy::too_many_arguments)]
pub fn convt2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    out_pad: usize,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>)> {
    let d = convt_dims(input, weight, stride, pad, out_pad)?;
    let parallel = default_parallel();
    let in_plane = d.in_h * d.in_w;
    let out_plane = d.out_h * d.out_w;
    let go = grad_out.data();
    debug_assert_eq!(go.len(), d.batch * d.c_out * out_plane);

    let grad_input = if need_input {
        let w = weight.data();
        let mut gi = vec![T::zero(); d.batch * d.c_in * in_plane];
        for_each_plane(parallel, &mut gi, in_plane, |p, acc| {
            let b = p / d.c_in;
            let ci = p % d.c_in;
            for co in 0..d.c_out {
                let gplane = &go[(b * d.c_out + co) * out_plane..][..out_plane];
                for ky in 0..d.k {
                    for kx in 0..d.k {
                        let wv = w[((ci * d.c_out + co) * d.k + ky) * d.k + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        accumulate_corr(
                            acc, gplane, wv, d.in_h, d.in_w, d.out_h, d.out_w, stride, pad, ky, kx,
                        );
                    }
                }
            }
        });
        Some(Tensor::from_vec(&[d.batch, d.c_in, d.in_h, d.in_w], gi)?)
    } else {
        None
    };

    let grad_weight = if need_weight {
        let x = input.data();
        let kk = d.k * d.k;
        let mut gw = vec![T::zero(); d.c_in * d.c_out * kk];
        for_each_plane(parallel, &mut gw, kk, |p, acc| {
            let ci = p / d.c_out;
            let co = p % d.c_out;
            for b in 0..d.batch {
                let gplane = &go[(b * d.c_out + co) * out_plane..][..out_plane];
                let xplane = &x[(b * d.c_in + ci) * in_plane..][..in_plane];
                for ky in 0..d.k {
                    for kx in 0..d.k {
                        acc[ky * d.k + kx] += window_dot(
                            xplane, gplane, d.in_h, d.in_w, d.out_h, d.out_w, stride, pad, ky, kx,
                        );
                    }
                }
            }
        });
        Some(Tensor::from_vec(&[d.c_in, d.c_out, d.k, d.k], gw)?)
    } else {
        None
    };

    let grad_bias = if need_bias {
        let mut gb = vec![T::zero(); d.c_out];
        for b in 0..d.batch {
            for (co, acc) in gb.iter_mut().enumerate() {
                let gplane = &go[(b * d.c_out + co) * out_plane..][..out_plane];
                *acc += gplane.iter().copied().sum();
            }
        }
        Some(Tensor::from_vec(&[d.c_out], gb)?)
    } else {
        None
    };

    Ok((grad_input, grad_weight, grad_bias))
}

/// `out_pad` that makes a transposed conv recover exactly `target` samples.
pub fn out_pad_for(target: usize, conv_out: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let base = (conv_out - 1) * stride + k;
    if base < 2 * pad || target + 2 * pad < base {
        return Err(Error::shape(format!(
            "no output padding maps {conv_out} back to {target} (k={k}, stride={stride}, pad={pad})"
        )));
    }
    let op = target + 2 * pad - base;
    if op >= stride {
        return Err(Error::shape(format!(
            "required output padding {op} >= stride {stride}"
        )));
    }
    Ok(op)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(dims, v.to_vec()).unwrap()
    }

    #[test]
    fn conv_direct_oracle_2x2() {
        // input [[1,2],[3,4]], kernel [[1,0],[0,1]], stride 1, pad 0 -> [[5]]
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let w = t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let y = conv2d_forward(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.dims(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 3, 4], |i| i as f64 * 0.5 - 2.0);
        let w = t(&[1, 1, 1, 1], &[1.0]);
        let b = t(&[1], &[0.0]);
        let y = conv2d_forward(&x, &w, Some(&b), 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    /// Brute-force convolution: direct nested-loop summation.
    fn conv_naive(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        bias: Option<&Tensor<f64>>,
        stride: usize,
        pad: usize,
    ) -> Tensor<f64> {
        let (bn, ci, h, wd) = x.dims4().unwrap();
        let (co, _, k, _) = w.dims4().unwrap();
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; bn * co * oh * ow];
        for b in 0..bn {
            for o in 0..co {
                for yo in 0..oh {
                    for xo in 0..ow {
                        let mut acc = bias.map_or(0.0, |bb| bb.data()[o]);
                        for c in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let yi = (yo * stride + ky) as isize - pad as isize;
                                    let xi = (xo * stride + kx) as isize - pad as isize;
                                    if yi < 0 || xi < 0 || yi >= h as isize || xi >= wd as isize {
                                        continue;
                                    }
                                    let xv = x.data()
                                        [((b * ci + c) * h + yi as usize) * wd + xi as usize];
                                    let wv = w.data()[((o * ci + c) * k + ky) * k + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out[((b * co + o) * oh + yo) * ow + xo] = acc;
                    }
                }
            }
        }
        Tensor::from_vec(&[bn, co, oh, ow], out).unwrap()
    }

    #[test]
    fn conv_matches_naive_oracle() {
        use rand::prelude::*;
        use rand_chacha::ChaCha12Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for &(b, ci, co, h, w, k, s, p) in &[
            (1usize, 1usize, 1usize, 5usize, 5usize, 3usize, 1usize, 1usize),
            (2, 3, 4, 6, 7, 3, 1, 1),
            (1, 2, 3, 8, 8, 3, 2, 1),
            (1, 2, 2, 7, 9, 5, 2, 2),
            (1, 1, 2, 4, 4, 1, 1, 0),
            (2, 2, 2, 6, 6, 2, 2, 0),
        ] {
            let x = Tensor::from_fn(&[b, ci, h, w], |_| rng.random_range(-1.0..1.0));
            let wt = Tensor::from_fn(&[co, ci, k, k], |_| rng.random_range(-1.0..1.0));
            let bias = Tensor::from_fn(&[co], |_| rng.random_range(-1.0..1.0));
            let got = conv2d_forward(&x, &wt, Some(&bias), s, p).unwrap();
            let want = conv_naive(&x, &wt, Some(&bias), s, p);
            assert_eq!(got.dims(), want.dims());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn convt_scatter_oracle() {
        // 1x1 input value 1, 2x2 kernel of ones, stride 2 -> 2x2 of ones
        let x = t(&[1, 1, 1, 1], &[1.0]);
        let w = t(&[1, 1, 2, 2], &[1.0, 1.0, 1.0, 1.0]);
        let y = convt2d_forward(&x, &w, None, 2, 0, 0).unwrap();
        assert_eq!(y.dims(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn convt_restores_identity_conv() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 3, 3], |i| i as f64);
        let w = t(&[1, 1, 1, 1], &[1.0]);
        let y = conv2d_forward(&x, &w, None, 1, 0).unwrap();
        let back = convt2d_forward(&y, &w, None, 1, 0, 0).unwrap();
        assert_eq!(back.data(), x.data());
    }

    /// Dense-matrix oracle: conv as an explicit matrix, transposed conv must
    /// apply its transpose.
    #[test]
    fn convt_is_matrix_adjoint_on_4x4() {
        use rand::prelude::*;
        use rand_chacha::ChaCha12Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let (h, w, k, s, p) = (4usize, 4usize, 3usize, 1usize, 1usize);
        let wt = Tensor::from_fn(&[1, 1, k, k], |_| rng.random_range(-1.0..1.0));
        let n_in = h * w;
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (w + 2 * p - k) / s + 1;
        let n_out = oh * ow;
        // build the conv matrix column by column
        let mut mat = vec![vec![0.0f64; n_in]; n_out];
        for col in 0..n_in {
            let mut e = vec![0.0; n_in];
            e[col] = 1.0;
            let x = Tensor::from_vec(&[1, 1, h, w], e).unwrap();
            let y = conv2d_forward(&x, &wt, None, s, p).unwrap();
            for (row, &v) in y.data().iter().enumerate() {
                mat[row][col] = v;
            }
        }
        let y = Tensor::from_fn(&[1, 1, oh, ow], |_| rng.random_range(-1.0..1.0));
        let got = convt2d_forward(&y, &wt, None, s, p, 0).unwrap();
        for col in 0..n_in {
            let want: f64 = (0..n_out).map(|row| mat[row][col] * y.data()[row]).sum();
            assert!((got.data()[col] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn adjoint_identity_inner_products() {
        use rand::prelude::*;
        use rand_chacha::ChaCha12Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for &(ci, co, k, s, p, oh_w) in &[
            (1usize, 1usize, 3usize, 1usize, 1usize, 5usize),
            (2, 3, 3, 2, 1, 4),
            (3, 2, 2, 2, 0, 5),
            (1, 4, 5, 3, 2, 3),
        ] {
            let h = (oh_w - 1) * s + k;
            let h = if h >= 2 * p + 1 { h - 2 * p } else { continue };
            let x = Tensor::from_fn(&[1, ci, h, h], |_| rng.random_range(-1.0..1.0));
            let wt = Tensor::from_fn(&[co, ci, k, k], |_| rng.random_range(-1.0..1.0));
            let y = Tensor::from_fn(&[1, co, oh_w, oh_w], |_| rng.random_range(-1.0..1.0));
            let cx = conv2d_forward(&x, &wt, None, s, p).unwrap();
            assert_eq!(cx.dims(), y.dims());
            let cty = convt2d_forward(&y, &wt, None, s, p, 0).unwrap();
            assert_eq!(cty.dims(), x.dims());
            let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(cty.data()).map(|(a, b)| a * b).sum();
            let denom = lhs.abs().max(rhs.abs()).max(1e-30);
            assert!(
                ((lhs - rhs) / denom).abs() < 1e-12,
                "adjoint mismatch {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn parallel_and_serial_agree_bitwise() {
        use rand::prelude::*;
        use rand_chacha::ChaCha12Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let x = Tensor::<f64>::from_fn(&[2, 3, 16, 16], |_| rng.random_range(-1.0..1.0));
        let w = Tensor::<f64>::from_fn(&[4, 3, 3, 3], |_| rng.random_range(-1.0..1.0));
        let b = Tensor::<f64>::from_fn(&[4], |_| rng.random_range(-1.0..1.0));
        let a = conv2d_forward(&x, &w, Some(&b), 2, 1).unwrap();
        let s = conv2d_forward_serial(&x, &w, Some(&b), 2, 1).unwrap();
        assert_eq!(a.data(), s.data());
        let wt = Tensor::<f64>::from_fn(&[3, 2, 3, 3], |_| rng.random_range(-1.0..1.0));
        let a = convt2d_forward(&x, &wt, None, 2, 1, 1).unwrap();
        let s = convt2d_forward_serial(&x, &wt, None, 2, 1, 1).unwrap();
        assert_eq!(a.data(), s.data());
    }

    #[test]
    fn rejects_bad_arguments() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        let w = Tensor::<f64>::zeros(&[1, 3, 3, 3]);
        assert!(conv2d_forward(&x, &w, None, 1, 1).is_err()); // channel mismatch
        let w2 = Tensor::<f64>::zeros(&[1, 2, 3, 3]);
        assert!(conv2d_forward(&x, &w2, None, 0, 1).is_err()); // zero stride
        let big = Tensor::<f64>::zeros(&[1, 2, 7, 7]);
        assert!(conv2d_forward(&x, &big, None, 1, 0).is_err()); // kernel does not fit
    }

    #[test]
    fn stride2_even_doubling_uses_out_pad() {
        // 3x3 kernel, stride 2, pad 1: H -> H/2 (even H); out_pad 1 recovers H.
        let x = Tensor::<f64>::from_fn(&[1, 1, 8, 8], |i| i as f64);
        let w = Tensor::<f64>::from_fn(&[1, 1, 3, 3], |i| i as f64 * 0.1);
        let y = conv2d_forward(&x, &w, None, 2, 1).unwrap();
        assert_eq!(y.dims(), &[1, 1, 4, 4]);
        let op = out_pad_for(8, 4, 3, 2, 1).unwrap();
        assert_eq!(op, 1);
        let back = convt2d_forward(&y, &w, None, 2, 1, op).unwrap();
        assert_eq!(back.dims(), &[1, 1, 8, 8]);
    }
}
