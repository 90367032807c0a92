//! Forward and backward kernels for the operator set the search space uses.
//!
//! All reductions run in a fixed sequential order so repeated calls are
//! bitwise reproducible.

use super::tensor::{gemm, Real, Tensor, View};
use crate::archgraph::Shape;

/// Stabilizer added to the variance in per-channel normalization.
pub const NORM_EPS: f64 = 1e-6;

pub fn conv_out_shape(input: Shape, out_channels: usize, stride: usize) -> Shape {
    Shape::new(
        out_channels,
        input.height.div_ceil(stride),
        input.width.div_ceil(stride),
    )
}

/// Copies the input samples seen by filter tap `(ky, kx)` into `col`
/// (C rows of `ho * wo`), zero outside the padded border.
#[allow(clippy::too_many_arguments)]
fn gather<T: Real>(
    x: &Tensor<T>,
    ky: usize,
    kx: usize,
    pad: usize,
    stride: usize,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    let (c_in, h, w) = (x.shape.channels, x.shape.height, x.shape.width);
    let (ox_lo, ox_hi) = tap_range(kx, pad, stride, w, wo);
    for c in 0..c_in {
        let src = x.channel(c);
        for oy in 0..ho {
            let row = &mut col[(c * ho + oy) * wo..(c * ho + oy + 1) * wo];
            let iy = (oy * stride + ky) as isize - pad as isize;
            if iy < 0 || iy >= h as isize || ox_lo >= ox_hi {
                row.fill(T::zero());
                continue;
            }
            let line = &src[iy as usize * w..(iy as usize + 1) * w];
            row[..ox_lo].fill(T::zero());
            row[ox_hi..].fill(T::zero());
            let ix0 = ox_lo * stride + kx - pad;
            if stride == 1 {
                row[ox_lo..ox_hi].copy_from_slice(&line[ix0..ix0 + (ox_hi - ox_lo)]);
            } else {
                for (k, v) in row[ox_lo..ox_hi].iter_mut().enumerate() {
                    *v = line[ix0 + k * stride];
                }
            }
        }
    }
}

/// Adjoint of [`gather`]: accumulates `col` back into `dx`.
#[allow(clippy::too_many_arguments)]
fn scatter_add<T: Real>(
    col: &[T],
    ky: usize,
    kx: usize,
    pad: usize,
    stride: usize,
    ho: usize,
    wo: usize,
    shape: Shape,
    dx: &mut [T],
) {
    let (c_in, h, w) = (shape.channels, shape.height, shape.width);
    let (ox_lo, ox_hi) = tap_range(kx, pad, stride, w, wo);
    if ox_lo >= ox_hi {
        return;
    }
    for c in 0..c_in {
        for oy in 0..ho {
            let iy = (oy * stride + ky) as isize - pad as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            let row = &col[(c * ho + oy) * wo..(c * ho + oy + 1) * wo];
            let base = (c * h + iy as usize) * w;
            let ix0 = ox_lo * stride + kx - pad;
            for (k, &v) in row[ox_lo..ox_hi].iter().enumerate() {
                dx[base + ix0 + k * stride] = dx[base + ix0 + k * stride] + v;
            }
        }
    }
}

/// Output columns `[lo, hi)` whose tap `kx` lands inside the input row.
fn tap_range(kx: usize, pad: usize, stride: usize, w: usize, wo: usize) -> (usize, usize) {
    // ix = ox * stride + kx - pad must lie in [0, w)
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    let hi = if w + pad > kx {
        ((w + pad - kx - 1) / stride + 1).min(wo)
    } else {
        0
    };
    (lo.min(wo), hi.max(lo.min(wo)))
}

/// Taps per im2col block: enough to give the GEMM a useful inner dimension
/// while bounding the scratch buffer.
fn tap_block(c_in: usize, taps: usize, n: usize) -> usize {
    const MIN_INNER: usize = 256;
    const MAX_SCRATCH: usize = 1 << 22;
    let want = MIN_INNER.div_ceil(c_in.max(1));
    let fit = (MAX_SCRATCH / (c_in * n).max(1)).max(1);
    want.min(fit).clamp(1, taps)
}

/// `[out][in][tap]` to `[out][tap][in]`.
fn taps_major<T: Real>(weight: &[T], out_channels: usize, c_in: usize, taps: usize) -> Vec<T> {
    let mut w = vec![T::zero(); weight.len()];
    for o in 0..out_channels {
        for c in 0..c_in {
            for t in 0..taps {
                w[(o * taps + t) * c_in + c] = weight[(o * c_in + c) * taps + t];
            }
        }
    }
    w
}

/// Below this many output channels convolutions run directly instead of
/// through im2col + GEMM, whose gather cost does not depend on the output
/// width.
pub const DIRECT_CONV_MAX_OUT: usize = 8;

/// Zero-padded ("same") 2-D convolution. `weight` is laid out
/// `[out][in][ky][kx]`.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    bias: &[T],
    out_channels: usize,
    filter: usize,
    stride: usize,
) -> Tensor<T> {
    if out_channels < DIRECT_CONV_MAX_OUT && filter > 1 {
        conv2d_direct(x, weight, bias, out_channels, filter, stride)
    } else {
        conv2d_im2col(x, weight, bias, out_channels, filter, stride)
    }
}

/// Gradients of [`conv2d`]. Accumulates into `dw` and `db`; when `dx` is
/// given, accumulates the input gradient into it.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    filter: usize,
    stride: usize,
    dy: &Tensor<T>,
    dx: Option<&mut [T]>,
    dw: &mut [T],
    db: &mut [T],
) {
    if dy.shape.channels < DIRECT_CONV_MAX_OUT && filter > 1 {
        conv2d_backward_direct(x, weight, filter, stride, dy, dx, dw, db)
    } else {
        conv2d_backward_im2col(x, weight, filter, stride, dy, dx, dw, db)
    }
}

/// Valid output rows `[lo, hi)` for vertical tap `ky`.
fn row_range(ky: usize, pad: usize, stride: usize, h: usize, ho: usize) -> (usize, usize) {
    tap_range(ky, pad, stride, h, ho)
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T], n: usize) {
    for (o, &b) in bias.iter().enumerate() {
        for v in &mut out[o * n..(o + 1) * n] {
            *v = *v + b;
        }
    }
}

pub(crate) fn conv2d_direct<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    bias: &[T],
    out_channels: usize,
    filter: usize,
    stride: usize,
) -> Tensor<T> {
    let (c_in, h, w) = (x.shape.channels, x.shape.height, x.shape.width);
    assert_eq!(weight.len(), out_channels * c_in * filter * filter);
    assert_eq!(bias.len(), out_channels);
    assert!(filter % 2 == 1, "filter size must be odd");
    let pad = (filter - 1) / 2;
    let out_shape = conv_out_shape(x.shape, out_channels, stride);
    let (ho, wo) = (out_shape.height, out_shape.width);
    let n = ho * wo;
    let mut out = Tensor::zeros(out_shape);
    for o in 0..out_channels {
        let plane = &mut out.data[o * n..(o + 1) * n];
        for c in 0..c_in {
            let src = x.channel(c);
            for ky in 0..filter {
                let (y0, y1) = row_range(ky, pad, stride, h, ho);
                for kx in 0..filter {
                    let wv = weight[((o * c_in + c) * filter + ky) * filter + kx];
                    let (x0, x1) = tap_range(kx, pad, stride, w, wo);
                    if x0 >= x1 {
                        continue;
                    }
                    for oy in y0..y1 {
                        let iy = oy * stride + ky - pad;
                        let ix0 = x0 * stride + kx - pad;
                        let dst = &mut plane[oy * wo + x0..oy * wo + x1];
                        let line = &src[iy * w..(iy + 1) * w];
                        if stride == 1 {
                            for (d, &v) in dst.iter_mut().zip(&line[ix0..ix0 + (x1 - x0)]) {
                                *d = *d + wv * v;
                            }
                        } else {
                            for (d, &v) in dst.iter_mut().zip(line[ix0..].iter().step_by(stride)) {
                                *d = *d + wv * v;
                            }
                        }
                    }
                }
            }
        }
    }
    add_bias(&mut out.data, bias, n);
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward_direct<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    filter: usize,
    stride: usize,
    dy: &Tensor<T>,
    mut dx: Option<&mut [T]>,
    dw: &mut [T],
    db: &mut [T],
) {
    let (c_in, h, w) = (x.shape.channels, x.shape.height, x.shape.width);
    let out_channels = dy.shape.channels;
    let pad = (filter - 1) / 2;
    let (ho, wo) = (dy.shape.height, dy.shape.width);
    let n = ho * wo;
    assert_eq!(dw.len(), weight.len());
    for (o, g) in db.iter_mut().enumerate() {
        let s: T = dy.data[o * n..(o + 1) * n].iter().copied().sum();
        *g = *g + s;
    }
    for o in 0..out_channels {
        let g = &dy.data[o * n..(o + 1) * n];
        for c in 0..c_in {
            let src = x.channel(c);
            for ky in 0..filter {
                let (y0, y1) = row_range(ky, pad, stride, h, ho);
                for kx in 0..filter {
                    let widx = ((o * c_in + c) * filter + ky) * filter + kx;
                    let wv = weight[widx];
                    let (x0, x1) = tap_range(kx, pad, stride, w, wo);
                    if x0 >= x1 {
                        continue;
                    }
                    let ix0 = x0 * stride + kx - pad;
                    let mut acc = T::zero();
                    for oy in y0..y1 {
                        let iy = oy * stride + ky - pad;
                        let grow = &g[oy * wo + x0..oy * wo + x1];
                        let line = &src[iy * w..(iy + 1) * w];
                        if stride == 1 {
                            for (&a, &b) in grow.iter().zip(&line[ix0..ix0 + (x1 - x0)]) {
                                acc = acc + a * b;
                            }
                        } else {
                            for (&a, &b) in grow.iter().zip(line[ix0..].iter().step_by(stride)) {
                                acc = acc + a * b;
                            }
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            let base = (c * h + iy) * w;
                            let drow = &mut dx[base..base + w];
                            if stride == 1 {
                                for (d, &a) in drow[ix0..ix0 + (x1 - x0)].iter_mut().zip(grow) {
                                    *d = *d + wv * a;
                                }
                            } else {
                                for (d, &a) in drow[ix0..].iter_mut().step_by(stride).zip(grow) {
                                    *d = *d + wv * a;
                                }
                            }
                        }
                    }
                    dw[widx] = dw[widx] + acc;
                }
            }
        }
    }
}

pub(crate) fn conv2d_im2col<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    bias: &[T],
    out_channels: usize,
    filter: usize,
    stride: usize,
) -> Tensor<T> {
    let c_in = x.shape.channels;
    assert_eq!(weight.len(), out_channels * c_in * filter * filter);
    assert_eq!(bias.len(), out_channels);
    assert!(filter % 2 == 1, "filter size must be odd");
    let pad = (filter - 1) / 2;
    let out_shape = conv_out_shape(x.shape, out_channels, stride);
    let (ho, wo) = (out_shape.height, out_shape.width);
    let n = ho * wo;
    let mut out = Tensor::zeros(out_shape);
    let taps = filter * filter;
    if filter == 1 && stride == 1 {
        let w = View::dense(weight, out_channels, c_in);
        gemm(w, View::dense(&x.data, c_in, n), T::zero(), &mut out.data, 0, n, 1);
    } else {
        let wt = taps_major(weight, out_channels, c_in, taps);
        let block = tap_block(c_in, taps, n);
        let mut col = vec![T::zero(); block * c_in * n];
        for t0 in (0..taps).step_by(block) {
            let t1 = (t0 + block).min(taps);
            for t in t0..t1 {
                let at = (t - t0) * c_in * n;
                gather(x, t / filter, t % filter, pad, stride, ho, wo, &mut col[at..at + c_in * n]);
            }
            let k = (t1 - t0) * c_in;
            let w = View {
                data: &wt,
                offset: t0 * c_in,
                rows: out_channels,
                cols: k,
                rs: taps * c_in,
                cs: 1,
            };
            gemm(w, View::dense(&col[..k * n], k, n), T::one(), &mut out.data, 0, n, 1);
        }
    }
    for (o, &b) in bias.iter().enumerate() {
        for v in &mut out.data[o * n..(o + 1) * n] {
            *v = *v + b;
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward_im2col<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    filter: usize,
    stride: usize,
    dy: &Tensor<T>,
    dx: Option<&mut [T]>,
    dw: &mut [T],
    db: &mut [T],
) {
    let c_in = x.shape.channels;
    let out_channels = dy.shape.channels;
    let pad = (filter - 1) / 2;
    let (ho, wo) = (dy.shape.height, dy.shape.width);
    let n = ho * wo;
    let taps = filter * filter;
    assert_eq!(dw.len(), weight.len());

    for (o, g) in db.iter_mut().enumerate() {
        let s: T = dy.data[o * n..(o + 1) * n].iter().copied().sum();
        *g = *g + s;
    }
    let dy_view = View::dense(&dy.data, out_channels, n);

    if filter == 1 && stride == 1 {
        let xv = View::dense(&x.data, c_in, n);
        gemm(dy_view, xv.t(), T::one(), dw, 0, c_in, 1);
        if let Some(dx) = dx {
            let w = View::dense(weight, out_channels, c_in);
            gemm(w.t(), dy_view, T::one(), dx, 0, n, 1);
        }
        return;
    }

    let wt = taps_major(weight, out_channels, c_in, taps);
    let mut dwt = vec![T::zero(); weight.len()];
    let block = tap_block(c_in, taps, n);
    let mut col = vec![T::zero(); block * c_in * n];
    let mut dcol = if dx.is_some() {
        vec![T::zero(); block * c_in * n]
    } else {
        Vec::new()
    };
    let mut dx = dx;
    for t0 in (0..taps).step_by(block) {
        let t1 = (t0 + block).min(taps);
        let k = (t1 - t0) * c_in;
        for t in t0..t1 {
            let at = (t - t0) * c_in * n;
            gather(x, t / filter, t % filter, pad, stride, ho, wo, &mut col[at..at + c_in * n]);
        }
        gemm(
            dy_view,
            View::dense(&col[..k * n], k, n).t(),
            T::one(),
            &mut dwt,
            t0 * c_in,
            taps * c_in,
            1,
        );
        if let Some(dx) = dx.as_deref_mut() {
            let w = View {
                data: &wt,
                offset: t0 * c_in,
                rows: out_channels,
                cols: k,
                rs: taps * c_in,
                cs: 1,
            };
            gemm(w.t(), dy_view, T::zero(), &mut dcol[..k * n], 0, n, 1);
            for t in t0..t1 {
                let at = (t - t0) * c_in * n;
                scatter_add(
                    &dcol[at..at + c_in * n],
                    t / filter,
                    t % filter,
                    pad,
                    stride,
                    ho,
                    wo,
                    x.shape,
                    dx,
                );
            }
        }
    }
    for o in 0..out_channels {
        for c in 0..c_in {
            for t in 0..taps {
                let g = &mut dw[(o * c_in + c) * taps + t];
                *g = *g + dwt[(o * taps + t) * c_in + c];
            }
        }
    }
}

/// Source taps `(i0, i1, frac)` for each output index of a half-pixel
/// (align-corners = false) linear resample.
fn linear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of every channel to `height x width`.
pub fn resize_bilinear<T: Real>(x: &Tensor<T>, height: usize, width: usize) -> Tensor<T> {
    assert!(height > 0 && width > 0, "target size must be positive");
    let s = x.shape;
    let out_shape = Shape::new(s.channels, height, width);
    if s.height == height && s.width == width {
        return x.clone();
    }
    let ty = linear_taps(s.height, height);
    let tx: Vec<(usize, usize, T, T)> = linear_taps(s.width, width)
        .into_iter()
        .map(|(a, b, l)| (a, b, T::of(1.0 - l), T::of(l)))
        .collect();
    let mut out = Tensor::zeros(out_shape);
    for c in 0..s.channels {
        let src = x.channel(c);
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::of(1.0 - ly), T::of(ly));
            let r0 = &src[y0 * s.width..(y0 + 1) * s.width];
            let r1 = &src[y1 * s.width..(y1 + 1) * s.width];
            let dst = &mut out.data[(c * height + oy) * width..(c * height + oy + 1) * width];
            for (d, &(x0, x1, wx0, wx1)) in dst.iter_mut().zip(&tx) {
                *d = wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]);
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`].
pub fn resize_bilinear_backward<T: Real>(dy: &Tensor<T>, input: Shape) -> Tensor<T> {
    let (height, width) = (dy.shape.height, dy.shape.width);
    if input.height == height && input.width == width {
        return dy.clone();
    }
    let ty = linear_taps(input.height, height);
    let tx: Vec<(usize, usize, T, T)> = linear_taps(input.width, width)
        .into_iter()
        .map(|(a, b, l)| (a, b, T::of(1.0 - l), T::of(l)))
        .collect();
    let mut dx = Tensor::zeros(input);
    let w = input.width;
    for c in 0..input.channels {
        let plane = &mut dx.data[c * input.height * w..(c + 1) * input.height * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::of(1.0 - ly), T::of(ly));
            let g = &dy.data[(c * height + oy) * width..(c * height + oy + 1) * width];
            for (&gv, &(x0, x1, wx0, wx1)) in g.iter().zip(&tx) {
                plane[y0 * w + x0] = plane[y0 * w + x0] + wy0 * wx0 * gv;
                plane[y0 * w + x1] = plane[y0 * w + x1] + wy0 * wx1 * gv;
                plane[y1 * w + x0] = plane[y1 * w + x0] + wy1 * wx0 * gv;
                plane[y1 * w + x1] = plane[y1 * w + x1] + wy1 * wx1 * gv;
            }
        }
    }
    dx
}

/// Channel-wise concatenation. All inputs must share a plane size.
pub fn concat<T: Real>(xs: &[&Tensor<T>]) -> Tensor<T> {
    let first = xs[0].shape;
    assert!(xs.iter().all(|t| t.shape.same_plane(&first)), "plane mismatch");
    let channels = xs.iter().map(|t| t.shape.channels).sum();
    let mut data = Vec::with_capacity(channels * first.height * first.width);
    for t in xs {
        data.extend_from_slice(&t.data);
    }
    Tensor::from_vec(Shape::new(channels, first.height, first.width), data)
}

/// Splits a concat gradient back into per-input pieces.
pub fn concat_backward<T: Real>(dy: &Tensor<T>, parts: &[Shape]) -> Vec<Tensor<T>> {
    let mut offset = 0;
    parts
        .iter()
        .map(|&s| {
            let len = s.numel();
            let t = Tensor::from_vec(s, dy.data[offset..offset + len].to_vec());
            offset += len;
            t
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct NormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Per-channel standardization over spatial positions followed by a learned
/// scale and shift.
pub fn norm_forward<T: Real>(x: &Tensor<T>, gamma: &[T], beta: &[T]) -> (Tensor<T>, NormCache<T>) {
    let p = x.plane();
    let c = x.shape.channels;
    let inv_n = T::one() / T::of(p as f64);
    let eps = T::of(NORM_EPS);
    let mut y = Tensor::zeros(x.shape);
    let mut xhat = vec![T::zero(); x.data.len()];
    let mut inv_std = Vec::with_capacity(c);
    for ch in 0..c {
        let src = x.channel(ch);
        let mean = src.iter().copied().sum::<T>() * inv_n;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let inv = T::one() / (var + eps).sqrt();
        inv_std.push(inv);
        for i in 0..p {
            let h = (src[i] - mean) * inv;
            xhat[ch * p + i] = h;
            y.data[ch * p + i] = gamma[ch] * h + beta[ch];
        }
    }
    (y, NormCache { xhat, inv_std })
}

/// Gradients of [`norm_forward`]. Overwrites `dx`; accumulates `dgamma`,
/// `dbeta`.
pub fn norm_backward<T: Real>(
    cache: &NormCache<T>,
    gamma: &[T],
    dy: &Tensor<T>,
    dx: &mut [T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) {
    let p = dy.plane();
    let n = T::of(p as f64);
    for ch in 0..dy.shape.channels {
        let g = dy.channel(ch);
        let xh = &cache.xhat[ch * p..(ch + 1) * p];
        let mut sum_dy = T::zero();
        let mut sum_dy_xh = T::zero();
        for i in 0..p {
            sum_dy = sum_dy + g[i];
            sum_dy_xh = sum_dy_xh + g[i] * xh[i];
        }
        dgamma[ch] = dgamma[ch] + sum_dy_xh;
        dbeta[ch] = dbeta[ch] + sum_dy;
        let k = gamma[ch] * cache.inv_std[ch] / n;
        for i in 0..p {
            dx[ch * p + i] = k * (n * g[i] - sum_dy - xh[i] * sum_dy_xh);
        }
    }
}

pub fn leaky_relu<T: Real>(x: &mut Tensor<T>, slope: f64) {
    let s = T::of(slope);
    for v in &mut x.data {
        if *v < T::zero() {
            *v = *v * s;
        }
    }
}

/// Gradient through a leaky rectifier, using its output `y` (which has the
/// sign of its input). Modifies `dy` in place.
pub fn leaky_relu_backward<T: Real>(y: &Tensor<T>, dy: &mut [T], slope: f64) {
    let s = T::of(slope);
    for (g, &v) in dy.iter_mut().zip(&y.data) {
        if v <= T::zero() {
            *g = *g * s;
        }
    }
}

pub fn sigmoid<T: Real>(x: &mut Tensor<T>) {
    for v in &mut x.data {
        *v = T::one() / (T::one() + (-*v).exp());
    }
}

/// Gradient through the logistic function given its output `y`.
pub fn sigmoid_backward<T: Real>(y: &Tensor<T>, dy: &mut [T]) {
    for (g, &v) in dy.iter_mut().zip(&y.data) {
        *g = *g * v * (T::one() - v);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNorm {
    L1,
    L2,
}

/// Mean absolute or squared error over the elements where `weight` is
/// nonzero (all elements when `weight` is `None`). Returns the loss and its
/// gradient with respect to `pred`. An empty selection has zero loss.
pub fn masked_loss<T: Real>(
    pred: &[T],
    target: &[T],
    weight: Option<&[T]>,
    norm: LossNorm,
) -> (f64, Vec<T>) {
    assert_eq!(pred.len(), target.len());
    let active = |i: usize| weight.is_none_or(|w| w[i] != T::zero());
    let count = (0..pred.len()).filter(|&i| active(i)).count();
    let mut grad = vec![T::zero(); pred.len()];
    if count == 0 {
        return (0.0, grad);
    }
    let inv = 1.0 / count as f64;
    let mut total = 0.0f64;
    for i in 0..pred.len() {
        if !active(i) {
            continue;
        }
        let d = pred[i].to_f64().unwrap() - target[i].to_f64().unwrap();
        match norm {
            LossNorm::L2 => {
                total += d * d;
                grad[i] = T::of(2.0 * d * inv);
            }
            LossNorm::L1 => {
                total += d.abs();
                // subgradient at zero is zero
                let s = if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                grad[i] = T::of(s * inv);
            }
        }
    }
    (total * inv, grad)
}
