//! Dense kernels behind the tape ops. All loops are deterministic and
//! single-threaded; reductions accumulate in f64 so results do not depend on
//! the working precision more than necessary.

use alloc::vec;
use alloc::vec::Vec;

use crate::scalar::Scalar;

/// Output length of a 1-D convolution axis.
#[inline]
pub fn conv_out_len(input: usize, kernel: usize, padding: usize, stride: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Half-open range of output coordinates whose sampled input coordinate
/// `o*stride + k_off - padding` lies inside `[0, in_len)`.
#[inline]
fn valid_out_range(
    in_len: usize,
    out_len: usize,
    k_off: usize,
    padding: usize,
    stride: usize,
) -> (usize, usize) {
    let lo = padding.saturating_sub(k_off).div_ceil(stride);
    let max_in = in_len as i64 - 1 + padding as i64 - k_off as i64;
    if max_in < 0 {
        return (0, 0);
    }
    let hi = core::cmp::min(out_len as i64 - 1, max_in / stride as i64);
    if hi < lo as i64 {
        (0, 0)
    } else {
        (lo, hi as usize + 1)
    }
}

/// Cross-correlation (deep-learning convention) with zero padding.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    dims: (usize, usize, usize, usize),
    w: &[T],
    wdims: (usize, usize, usize, usize),
    bias: Option<&[T]>,
    stride: usize,
    padding: usize,
) -> Vec<T> {
    let (nb, cin, ih, iw) = dims;
    let (cout, _, kh, kw) = wdims;
    let oh = conv_out_len(ih, kh, padding, stride);
    let ow = conv_out_len(iw, kw, padding, stride);
    let mut out = vec![T::zero(); nb * cout * oh * ow];
    for n in 0..nb {
        for oc in 0..cout {
            let out_plane = &mut out[(n * cout + oc) * oh * ow..][..oh * ow];
            if let Some(b) = bias {
                out_plane.fill(b[oc]);
            }
            for ic in 0..cin {
                let in_plane = &x[(n * cin + ic) * ih * iw..][..ih * iw];
                let w_k = &w[(oc * cin + ic) * kh * kw..][..kh * kw];
                for ky in 0..kh {
                    let (ylo, yhi) = valid_out_range(ih, oh, ky, padding, stride);
                    for kx in 0..kw {
                        let wv = w_k[ky * kw + kx];
                        let (xlo, xhi) = valid_out_range(iw, ow, kx, padding, stride);
                        if xhi <= xlo {
                            continue;
                        }
                        for oy in ylo..yhi {
                            let iy = oy * stride + ky - padding;
                            let out_row = &mut out_plane[oy * ow + xlo..oy * ow + xhi];
                            if stride == 1 {
                                let ix0 = xlo + kx - padding;
                                let in_row = &in_plane[iy * iw + ix0..][..xhi - xlo];
                                for (o, &v) in out_row.iter_mut().zip(in_row) {
                                    *o += wv * v;
                                }
                            } else {
                                let in_row = &in_plane[iy * iw..][..iw];
                                for (d, o) in out_row.iter_mut().enumerate() {
                                    let ix = (xlo + d) * stride + kx - padding;
                                    *o += wv * in_row[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`] w.r.t. input, weight, and bias.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    dims: (usize, usize, usize, usize),
    w: &[T],
    wdims: (usize, usize, usize, usize),
    gout: &[T],
    stride: usize,
    padding: usize,
    need_gx: bool,
    need_gw: bool,
    need_gb: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let (nb, cin, ih, iw) = dims;
    let (cout, _, kh, kw) = wdims;
    let oh = conv_out_len(ih, kh, padding, stride);
    let ow = conv_out_len(iw, kw, padding, stride);
    let mut gx = need_gx.then(|| vec![T::zero(); nb * cin * ih * iw]);
    let mut gw = need_gw.then(|| vec![T::zero(); w.len()]);
    let mut gb = need_gb.then(|| vec![T::zero(); cout]);

    if let Some(gb) = gb.as_mut() {
        for n in 0..nb {
            for oc in 0..cout {
                let g_plane = &gout[(n * cout + oc) * oh * ow..][..oh * ow];
                let mut acc = 0.0f64;
                for &g in g_plane {
                    acc += g.as_f64();
                }
                gb[oc] += T::of(acc);
            }
        }
    }

    for n in 0..nb {
        for oc in 0..cout {
            let g_plane = &gout[(n * cout + oc) * oh * ow..][..oh * ow];
            for ic in 0..cin {
                let in_plane = &x[(n * cin + ic) * ih * iw..][..ih * iw];
                let w_k = &w[(oc * cin + ic) * kh * kw..][..kh * kw];
                for ky in 0..kh {
                    let (ylo, yhi) = valid_out_range(ih, oh, ky, padding, stride);
                    for kx in 0..kw {
                        let (xlo, xhi) = valid_out_range(iw, ow, kx, padding, stride);
                        if xhi <= xlo {
                            continue;
                        }
                        let wv = w_k[ky * kw + kx];
                        let mut wacc = 0.0f64;
                        for oy in ylo..yhi {
                            let iy = oy * stride + ky - padding;
                            let g_row = &g_plane[oy * ow + xlo..oy * ow + xhi];
                            if stride == 1 {
                                let ix0 = xlo + kx - padding;
                                if let Some(gx) = gx.as_mut() {
                                    let gx_row = &mut gx[(n * cin + ic) * ih * iw + iy * iw + ix0..]
                                        [..xhi - xlo];
                                    for (gi, &g) in gx_row.iter_mut().zip(g_row) {
                                        *gi += wv * g;
                                    }
                                }
                                if need_gw {
                                    let in_row = &in_plane[iy * iw + ix0..][..xhi - xlo];
                                    for (&v, &g) in in_row.iter().zip(g_row) {
                                        wacc += (v * g).as_f64();
                                    }
                                }
                            } else {
                                for (d, &g) in g_row.iter().enumerate() {
                                    let ix = (xlo + d) * stride + kx - padding;
                                    if let Some(gx) = gx.as_mut() {
                                        gx[(n * cin + ic) * ih * iw + iy * iw + ix] += wv * g;
                                    }
                                    if need_gw {
                                        wacc += (in_plane[iy * iw + ix] * g).as_f64();
                                    }
                                }
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw[(oc * cin + ic) * kh * kw + ky * kw + kx] += T::of(wacc);
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Per-sample affine map: `out[n,o] = bias[o] + sum_i x[n,i] * w[o,i]`.
pub fn linear_forward<T: Scalar>(
    x: &[T],
    (nb, din): (usize, usize),
    w: &[T],
    dout: usize,
    bias: &[T],
) -> Vec<T> {
    let mut out = vec![T::zero(); nb * dout];
    for n in 0..nb {
        let x_row = &x[n * din..][..din];
        for o in 0..dout {
            let w_row = &w[o * din..][..din];
            let mut acc = bias[o];
            for (&xv, &wv) in x_row.iter().zip(w_row) {
                acc += xv * wv;
            }
            out[n * dout + o] = acc;
        }
    }
    out
}

pub fn linear_backward<T: Scalar>(
    x: &[T],
    (nb, din): (usize, usize),
    w: &[T],
    dout: usize,
    gout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut gx = vec![T::zero(); nb * din];
    let mut gw = vec![T::zero(); dout * din];
    let mut gb = vec![T::zero(); dout];
    for n in 0..nb {
        let x_row = &x[n * din..][..din];
        let gx_row = &mut gx[n * din..n * din + din];
        for o in 0..dout {
            let g = gout[n * dout + o];
            gb[o] += g;
            let w_row = &w[o * din..][..din];
            let gw_row = &mut gw[o * din..o * din + din];
            for i in 0..din {
                gx_row[i] += g * w_row[i];
                gw_row[i] += g * x_row[i];
            }
        }
    }
    (gx, gw, gb)
}

/// Channel-wise mean (channel 0) and max (channel 1) over `C`.
pub fn channel_stats_forward<T: Scalar>(
    x: &[T],
    (nb, c, h, w): (usize, usize, usize, usize),
) -> Vec<T> {
    let plane = h * w;
    let mut out = vec![T::zero(); nb * 2 * plane];
    for n in 0..nb {
        for p in 0..plane {
            let mut acc = 0.0f64;
            let mut maxv = x[(n * c) * plane + p];
            for ch in 0..c {
                let v = x[(n * c + ch) * plane + p];
                acc += v.as_f64();
                if v > maxv {
                    maxv = v;
                }
            }
            out[(n * 2) * plane + p] = T::of(acc / c as f64);
            out[(n * 2 + 1) * plane + p] = maxv;
        }
    }
    out
}

pub fn channel_stats_backward<T: Scalar>(
    x: &[T],
    (nb, c, h, w): (usize, usize, usize, usize),
    gout: &[T],
) -> Vec<T> {
    let plane = h * w;
    let mut gx = vec![T::zero(); nb * c * plane];
    let inv_c = T::of(1.0 / c as f64);
    for n in 0..nb {
        for p in 0..plane {
            // first channel attaining the max receives the max-branch gradient
            let mut arg = 0;
            let mut maxv = x[(n * c) * plane + p];
            for ch in 1..c {
                let v = x[(n * c + ch) * plane + p];
                if v > maxv {
                    maxv = v;
                    arg = ch;
                }
            }
            let g_avg = gout[(n * 2) * plane + p] * inv_c;
            for ch in 0..c {
                gx[(n * c + ch) * plane + p] += g_avg;
            }
            gx[(n * c + arg) * plane + p] += gout[(n * 2 + 1) * plane + p];
        }
    }
    gx
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest<T: Scalar>(
    x: &[T],
    (nb, c, h, w): (usize, usize, usize, usize),
    k: usize,
) -> Vec<T> {
    let (oh, ow) = (h * k, w * k);
    let mut out = vec![T::zero(); nb * c * oh * ow];
    for nc in 0..nb * c {
        let in_plane = &x[nc * h * w..][..h * w];
        let out_plane = &mut out[nc * oh * ow..][..oh * ow];
        for oy in 0..oh {
            let iy = oy / k;
            for ox in 0..ow {
                out_plane[oy * ow + ox] = in_plane[iy * w + ox / k];
            }
        }
    }
    out
}

pub fn upsample_nearest_backward<T: Scalar>(
    (nb, c, h, w): (usize, usize, usize, usize),
    k: usize,
    gout: &[T],
) -> Vec<T> {
    let (oh, ow) = (h * k, w * k);
    let mut gx = vec![T::zero(); nb * c * h * w];
    for nc in 0..nb * c {
        let g_plane = &gout[nc * oh * ow..][..oh * ow];
        let gx_plane = &mut gx[nc * h * w..nc * h * w + h * w];
        for oy in 0..oh {
            let iy = oy / k;
            for ox in 0..ow {
                gx_plane[iy * w + ox / k] += g_plane[oy * ow + ox];
            }
        }
    }
    gx
}

/// Block-average downsampling by an integer factor (dims must divide).
pub fn downsample_avg<T: Scalar>(
    x: &[T],
    (nb, c, h, w): (usize, usize, usize, usize),
    k: usize,
) -> Vec<T> {
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![T::zero(); nb * c * oh * ow];
    for nc in 0..nb * c {
        let in_plane = &x[nc * h * w..][..h * w];
        let out_plane = &mut out[nc * oh * ow..][..oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for dy in 0..k {
                    for dx in 0..k {
                        acc += in_plane[(oy * k + dy) * w + ox * k + dx].as_f64();
                    }
                }
                out_plane[oy * ow + ox] = T::of(acc * inv);
            }
        }
    }
    out
}

pub fn downsample_avg_backward<T: Scalar>(
    (nb, c, h, w): (usize, usize, usize, usize),
    k: usize,
    gout: &[T],
) -> Vec<T> {
    let (oh, ow) = (h / k, w / k);
    let inv = T::of(1.0 / (k * k) as f64);
    let mut gx = vec![T::zero(); nb * c * h * w];
    for nc in 0..nb * c {
        let g_plane = &gout[nc * oh * ow..][..oh * ow];
        let gx_plane = &mut gx[nc * h * w..nc * h * w + h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = g_plane[oy * ow + ox] * inv;
                for dy in 0..k {
                    for dx in 0..k {
                        gx_plane[(oy * k + dy) * w + ox * k + dx] += g;
                    }
                }
            }
        }
    }
    gx
}
