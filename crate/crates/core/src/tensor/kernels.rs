//! Raw numeric kernels behind the tensor ops.
//!
//! Every kernel has a sequential body; the hot ones (matmul, conv2d and its
//! gradients, bilinear resize) also have a rayon body used when the
//! `parallel` feature is on. Parallel work is split over independent output
//! slices (matrix rows, channels) and each output element is reduced by the
//! same fixed-order inner loop in both bodies, so results are bitwise
//! identical across modes. The `_seq`/`_par` pairs stay public so the bench
//! suite can compare them directly.

use super::Scalar;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Row-major matrix product: `a` is m x k, `b` is k x n.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    #[cfg(feature = "parallel")]
    matmul_par(&mut out, a, b, k, n);
    #[cfg(not(feature = "parallel"))]
    matmul_seq(&mut out, a, b, k, n);
    let _ = m;
    out
}

pub fn matmul_seq<T: Scalar>(out: &mut [T], a: &[T], b: &[T], k: usize, n: usize) {
    out.chunks_mut(n)
        .enumerate()
        .for_each(|(r, row)| matmul_row(row, &a[r * k..(r + 1) * k], b, n));
}

#[cfg(feature = "parallel")]
pub fn matmul_par<T: Scalar>(out: &mut [T], a: &[T], b: &[T], k: usize, n: usize) {
    out.par_chunks_mut(n)
        .enumerate()
        .for_each(|(r, row)| matmul_row(row, &a[r * k..(r + 1) * k], b, n));
}

#[inline]
fn matmul_row<T: Scalar>(row: &mut [T], a_row: &[T], b: &[T], n: usize) {
    for (kk, &av) in a_row.iter().enumerate() {
        let b_row = &b[kk * n..(kk + 1) * n];
        for (o, &bv) in row.iter_mut().zip(b_row) {
            *o = *o + av * bv;
        }
    }
}

/// 2-D transpose of an m x n matrix.
pub fn transpose<T: Scalar>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for r in 0..m {
        for c in 0..n {
            out[c * m + r] = a[r * n + c];
        }
    }
    out
}

/// Softmax along `axis` of a tensor with the given shape. Subtracts the slice
/// maximum before exponentiation so magnitude-1e3 inputs stay finite.
pub fn softmax_axis<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let mut m = T::neg_infinity();
            for s in 0..len {
                m = m.max(x[base + s * inner + i]);
            }
            let mut sum = T::zero();
            for s in 0..len {
                let idx = base + s * inner + i;
                let e = (x[idx] - m).exp();
                out[idx] = e;
                sum = sum + e;
            }
            for s in 0..len {
                out[base + s * inner + i] = out[base + s * inner + i] / sum;
            }
        }
    }
    out
}

/// Output spatial extent of a same-padded convolution with the given stride.
pub fn conv_out_extent(extent: usize, stride: usize) -> usize {
    (extent + stride - 1) / stride
}

/// Same-padded 2-D cross-correlation. `x` is cin x h x w, `kernel` is
/// cout x cin x ks x ks with ks in {1, 3}, `bias` is cout. Stride 1 keeps the
/// spatial size; stride 2 halves it (rounding up).
pub fn conv2d<T: Scalar>(
    x: &[T],
    kernel: &[T],
    bias: &[T],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    ks: usize,
    stride: usize,
) -> Vec<T> {
    let (ho, wo) = (conv_out_extent(h, stride), conv_out_extent(w, stride));
    let mut out = vec![T::zero(); cout * ho * wo];
    #[cfg(feature = "parallel")]
    conv2d_par(&mut out, x, kernel, bias, cin, h, w, ks, stride);
    #[cfg(not(feature = "parallel"))]
    conv2d_seq(&mut out, x, kernel, bias, cin, h, w, ks, stride);
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_seq<T: Scalar>(
    out: &mut [T],
    x: &[T],
    kernel: &[T],
    bias: &[T],
    cin: usize,
    h: usize,
    w: usize,
    ks: usize,
    stride: usize,
) {
    let (ho, wo) = (conv_out_extent(h, stride), conv_out_extent(w, stride));
    out.chunks_mut(ho * wo).enumerate().for_each(|(o, plane)| {
        conv2d_channel(plane, x, kernel, bias[o], o, cin, h, w, ks, stride);
    });
}

#[cfg(feature = "parallel")]
#[allow(clippy::too_many_arguments)]
pub fn conv2d_par<T: Scalar>(
    out: &mut [T],
    x: &[T],
    kernel: &[T],
    bias: &[T],
    cin: usize,
    h: usize,
    w: usize,
    ks: usize,
    stride: usize,
) {
    let (ho, wo) = (conv_out_extent(h, stride), conv_out_extent(w, stride));
    out.par_chunks_mut(ho * wo).enumerate().for_each(|(o, plane)| {
        conv2d_channel(plane, x, kernel, bias[o], o, cin, h, w, ks, stride);
    });
}

#[allow(clippy::too_many_arguments)]
fn conv2d_channel<T: Scalar>(
    plane: &mut [T],
    x: &[T],
    kernel: &[T],
    bias: T,
    o: usize,
    cin: usize,
    h: usize,
    w: usize,
    ks: usize,
    stride: usize,
) {
    let (ho, wo) = (conv_out_extent(h, stride), conv_out_extent(w, stride));
    let pad = (ks - 1) / 2;
    plane.iter_mut().for_each(|v| *v = bias);
    for c in 0..cin {
        let xc = &x[c * h * w..(c + 1) * h * w];
        let kc = &kernel[(o * cin + c) * ks * ks..(o * cin + c + 1) * ks * ks];
        for y in 0..ho {
            for i in 0..ks {
                let sy = (stride * y + i) as isize - pad as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                let x_row = &xc[sy as usize * w..(sy as usize + 1) * w];
                let out_row = &mut plane[y * wo..(y + 1) * wo];
                for j in 0..ks {
                    let kv = kc[i * ks + j];
                    if kv == T::zero() {
                        continue;
                    }
                    for (xo, ov) in out_row.iter_mut().enumerate() {
                        let sx = (stride * xo + j) as isize - pad as isize;
                        if sx >= 0 && sx < w as isize {
                            *ov = *ov + kv * x_row[sx as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of [`conv2d`] w.r.t. the input.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_grad_input<T: Scalar>(
    g: &[T],
    kernel: &[T],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    ks: usize,
    stride: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); cin * h * w];
    #[cfg(feature = "parallel")]
    out.par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(c, plane)| conv2d_grad_input_channel(plane, g, kernel, c, cin, h, w, cout, ks, stride));
    #[cfg(not(feature = "parallel"))]
    out.chunks_mut(h * w)
        .enumerate()
        .for_each(|(c, plane)| conv2d_grad_input_channel(plane, g, kernel, c, cin, h, w, cout, ks, stride));
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_grad_input_channel<T: Scalar>(
    plane: &mut [T],
    g: &[T],
    kernel: &[T],
    c: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    ks: usize,
    stride: usize,
) {
    let (ho, wo) = (conv_out_extent(h, stride), conv_out_extent(w, stride));
    let pad = (ks - 1) / 2;
    for o in 0..cout {
        let go = &g[o * ho * wo..(o + 1) * ho * wo];
        let kc = &kernel[(o * cin + c) * ks * ks..(o * cin + c + 1) * ks * ks];
        for y in 0..ho {
            for x in 0..wo {
                let gv = go[y * wo + x];
                if gv == T::zero() {
                    continue;
                }
                for i in 0..ks {
                    let sy = (stride * y + i) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for j in 0..ks {
                        let sx = (stride * x + j) as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let idx = sy as usize * w + sx as usize;
                        plane[idx] = plane[idx] + kc[i * ks + j] * gv;
                    }
                }
            }
        }
    }
}

/// Gradient of [`conv2d`] w.r.t. the kernel.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_grad_kernel<T: Scalar>(
    g: &[T],
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    ks: usize,
    stride: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); cout * cin * ks * ks];
    let per_out = cin * ks * ks;
    #[cfg(feature = "parallel")]
    out.par_chunks_mut(per_out)
        .enumerate()
        .for_each(|(o, chunk)| conv2d_grad_kernel_channel(chunk, g, x, o, cin, h, w, ks, stride));
    #[cfg(not(feature = "parallel"))]
    out.chunks_mut(per_out)
        .enumerate()
        .for_each(|(o, chunk)| conv2d_grad_kernel_channel(chunk, g, x, o, cin, h, w, ks, stride));
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_grad_kernel_channel<T: Scalar>(
    chunk: &mut [T],
    g: &[T],
    x: &[T],
    o: usize,
    cin: usize,
    h: usize,
    w: usize,
    ks: usize,
    stride: usize,
) {
    let (ho, wo) = (conv_out_extent(h, stride), conv_out_extent(w, stride));
    let pad = (ks - 1) / 2;
    let go = &g[o * ho * wo..(o + 1) * ho * wo];
    for c in 0..cin {
        let xc = &x[c * h * w..(c + 1) * h * w];
        for i in 0..ks {
            for j in 0..ks {
                let mut acc = T::zero();
                for y in 0..ho {
                    let sy = (stride * y + i) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x_row = &xc[sy as usize * w..(sy as usize + 1) * w];
                    let g_row = &go[y * wo..(y + 1) * wo];
                    for (xo, &gv) in g_row.iter().enumerate() {
                        let sx = (stride * xo + j) as isize - pad as isize;
                        if sx >= 0 && sx < w as isize {
                            acc = acc + gv * x_row[sx as usize];
                        }
                    }
                }
                chunk[c * ks * ks + i * ks + j] = acc;
            }
        }
    }
}

/// Gradient of [`conv2d`] w.r.t. the bias.
pub fn conv2d_grad_bias<T: Scalar>(g: &[T], cout: usize, ho: usize, wo: usize) -> Vec<T> {
    (0..cout)
        .map(|o| g[o * ho * wo..(o + 1) * ho * wo].iter().copied().sum())
        .collect()
}

/// Per-channel spatial maximum with the row-major index of the first maximum.
pub fn global_max_pool<T: Scalar>(x: &[T], c: usize, hw: usize) -> (Vec<T>, Vec<usize>) {
    let mut vals = Vec::with_capacity(c);
    let mut args = Vec::with_capacity(c);
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        let mut best = plane[0];
        let mut arg = 0;
        for (i, &v) in plane.iter().enumerate().skip(1) {
            if v > best {
                best = v;
                arg = i;
            }
        }
        vals.push(best);
        args.push(arg);
    }
    (vals, args)
}

/// Source coordinate mapping for align-corners-false bilinear interpolation:
/// returns (low index, high index, weight of the high index).
#[inline]
pub fn bilinear_coords(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    if src_len == dst_len {
        return (dst, dst, 0.0);
    }
    let scale = src_len as f64 / dst_len as f64;
    let s = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let lo = (s.floor() as usize).min(src_len - 1);
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, s - lo as f64)
}

/// Align-corners-false bilinear resize of a c x h x w map.
pub fn bilinear_resize<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); c * ho * wo];
    let plane_op = |(ch, plane): (usize, &mut [T])| {
        let xc = &x[ch * h * w..(ch + 1) * h * w];
        for y in 0..ho {
            let (y0, y1, wy) = bilinear_coords(y, h, ho);
            for xo in 0..wo {
                let (x0, x1, wx) = bilinear_coords(xo, w, wo);
                let v00 = xc[y0 * w + x0].to_f64_lossy();
                let v01 = xc[y0 * w + x1].to_f64_lossy();
                let v10 = xc[y1 * w + x0].to_f64_lossy();
                let v11 = xc[y1 * w + x1].to_f64_lossy();
                let top = v00 * (1.0 - wx) + v01 * wx;
                let bot = v10 * (1.0 - wx) + v11 * wx;
                plane[y * wo + xo] = T::of_f64(top * (1.0 - wy) + bot * wy);
            }
        }
    };
    #[cfg(feature = "parallel")]
    out.par_chunks_mut(ho * wo).enumerate().for_each(plane_op);
    #[cfg(not(feature = "parallel"))]
    out.chunks_mut(ho * wo).enumerate().for_each(plane_op);
    out
}

/// Gradient of [`bilinear_resize`] w.r.t. its input.
pub fn bilinear_resize_grad<T: Scalar>(
    g: &[T],
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); c * h * w];
    let plane_op = |(ch, plane): (usize, &mut [T])| {
        let gc = &g[ch * ho * wo..(ch + 1) * ho * wo];
        for y in 0..ho {
            let (y0, y1, wy) = bilinear_coords(y, h, ho);
            for xo in 0..wo {
                let (x0, x1, wx) = bilinear_coords(xo, w, wo);
                let gv = gc[y * wo + xo].to_f64_lossy();
                plane[y0 * w + x0] =
                    plane[y0 * w + x0] + T::of_f64(gv * (1.0 - wy) * (1.0 - wx));
                plane[y0 * w + x1] = plane[y0 * w + x1] + T::of_f64(gv * (1.0 - wy) * wx);
                plane[y1 * w + x0] = plane[y1 * w + x0] + T::of_f64(gv * wy * (1.0 - wx));
                plane[y1 * w + x1] = plane[y1 * w + x1] + T::of_f64(gv * wy * wx);
            }
        }
    };
    #[cfg(feature = "parallel")]
    out.par_chunks_mut(h * w).enumerate().for_each(plane_op);
    #[cfg(not(feature = "parallel"))]
    out.chunks_mut(h * w).enumerate().for_each(plane_op);
    out
}

/// Order-preserving parallel map; the sequential fallback is a plain map.
pub fn par_map<I: Sync, O: Send, F: Fn(&I) -> O + Sync>(items: &[I], f: F) -> Vec<O> {
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(|it| f(it)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}
