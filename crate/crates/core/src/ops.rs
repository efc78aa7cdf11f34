//! Tape-free forward and backward kernels.
//!
//! Convolutions lower to one batched im2col buffer and a single gemm. Layouts
//! are NCHW for images, `[O, C, kh, kw]` for conv kernels and `[C, O, kh, kw]`
//! for transposed-conv kernels.

use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Sliding-window geometry over one `channels × h × w` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Window {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Window {
    fn new(channels: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 {
            return Err(shape_err!("stride must be at least 1"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(shape_err!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            ));
        }
        Ok(Window {
            channels,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Maps output coordinate + kernel tap to the input coordinate, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let v = (o * self.stride + k) as isize - self.pad as isize;
        (v >= 0 && (v as usize) < extent).then_some(v as usize)
    }
}

/// Output extent of a convolution.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    (stride > 0 && input + 2 * pad >= kernel).then(|| (input + 2 * pad - kernel) / stride + 1)
}

/// Output extent of a transposed convolution, `None` if non-positive.
pub fn conv_transpose_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input == 0 {
        return None;
    }
    let full = (input - 1) * stride + kernel;
    (full > 2 * pad).then(|| full - 2 * pad)
}

/// Output extent of a max-pool window.
pub fn pool_out_extent(input: usize, kernel: usize, stride: usize) -> Option<usize> {
    (stride > 0 && kernel >= 1 && kernel <= input).then(|| (input - kernel) / stride + 1)
}

/// `x[B, C, H, W]` → `col[C·kh·kw, B·oh·ow]`.
fn im2col<T: Scalar>(x: &[T], batch: usize, g: &Window) -> Vec<T> {
    let p = g.positions();
    let ncols = batch * p;
    let mut col = vec![T::zero(); g.rows() * ncols];
    for c in 0..g.channels {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut col[row * ncols..(row + 1) * ncols];
                for b in 0..batch {
                    let plane = &x[(b * g.channels + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.oh {
                        let Some(iy) = g.src(oy, i, g.h) else { continue };
                        let d = &mut dst[b * p + oy * g.ow..][..g.ow];
                        for (ox, slot) in d.iter_mut().enumerate() {
                            if let Some(ix) = g.src(ox, j, g.w) {
                                *slot = plane[iy * g.w + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-adds columns back into `x[B, C, H, W]`.
fn col2im<T: Scalar>(col: &[T], batch: usize, g: &Window, x: &mut [T]) {
    let p = g.positions();
    let ncols = batch * p;
    for c in 0..g.channels {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &col[row * ncols..(row + 1) * ncols];
                for b in 0..batch {
                    let plane = &mut x[(b * g.channels + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.oh {
                        let Some(iy) = g.src(oy, i, g.h) else { continue };
                        let s = &src[b * p + oy * g.ow..][..g.ow];
                        for (ox, &v) in s.iter().enumerate() {
                            if let Some(ix) = g.src(ox, j, g.w) {
                                plane[iy * g.w + ix] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[B, C, P]` → `[C, B·P]`.
fn batch_major_to_channel_major<T: Scalar>(x: &[T], batch: usize, channels: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for c in 0..channels {
            out[c * batch * p + b * p..][..p].copy_from_slice(&x[(b * channels + c) * p..][..p]);
        }
    }
    out
}

/// `[C, B·P]` → `[B, C, P]`.
fn channel_major_to_batch_major<T: Scalar>(x: &[T], batch: usize, channels: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for c in 0..channels {
            out[(b * channels + c) * p..][..p].copy_from_slice(&x[c * batch * p + b * p..][..p]);
        }
    }
    out
}

/// Row-major `c[m×n] = a[m×k] · b[k×n]` (optionally transposing operands).
fn matmul<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

fn conv_window<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, stride: usize, pad: usize) -> Result<(usize, usize, Window)> {
    let [b, c, h, w] = input.dims4()?;
    let [o, kc, kh, kw] = kernel.dims4()?;
    if c != kc {
        return Err(shape_err!(
            "conv2d: input has {c} channels but kernel {o}x{kc}x{kh}x{kw} expects {kc}"
        ));
    }
    Ok((b, o, Window::new(c, h, w, kh, kw, stride, pad)?))
}

pub fn conv2d<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let (b, o, g) = conv_window(input, kernel, stride, pad)?;
    let p = g.positions();
    let col = im2col(input.data(), b, &g);
    let mut tmp = vec![T::zero(); o * b * p];
    matmul(o, g.rows(), b * p, kernel.data(), false, &col, false, &mut tmp, false);
    Tensor::new(&[b, o, g.oh, g.ow], channel_major_to_batch_major(&tmp, b, o, p))
}

/// Gradients of [`conv2d`] with respect to input and kernel.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_input: bool,
    need_kernel: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (b, o, g) = conv_window(input, kernel, stride, pad)?;
    let p = g.positions();
    let dtmp = batch_major_to_channel_major(grad_out.data(), b, o, p);
    let dk = if need_kernel {
        let col = im2col(input.data(), b, &g);
        let mut dk = vec![T::zero(); kernel.len()];
        matmul(o, b * p, g.rows(), &dtmp, false, &col, true, &mut dk, false);
        Some(Tensor::new(kernel.shape(), dk)?)
    } else {
        None
    };
    let dx = if need_input {
        let mut dcol = vec![T::zero(); g.rows() * b * p];
        matmul(g.rows(), o, b * p, kernel.data(), true, &dtmp, false, &mut dcol, false);
        let mut dx = vec![T::zero(); input.len()];
        col2im(&dcol, b, &g, &mut dx);
        Some(Tensor::new(input.shape(), dx)?)
    } else {
        None
    };
    Ok((dx, dk))
}

fn conv_transpose_window<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, usize, Window)> {
    let [b, c, h, w] = input.dims4()?;
    let [kc, o, kh, kw] = kernel.dims4()?;
    if c != kc {
        return Err(shape_err!(
            "conv_transpose2d: input has {c} channels but kernel {kc}x{o}x{kh}x{kw} expects {kc}"
        ));
    }
    let (Some(oh), Some(ow)) = (
        conv_transpose_out_extent(h, kh, stride, pad),
        conv_transpose_out_extent(w, kw, stride, pad),
    ) else {
        return Err(shape_err!(
            "conv_transpose2d: input {h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {pad} gives a non-positive output"
        ));
    };
    // The adjoint convolution maps the output grid back onto the input grid.
    let g = Window::new(o, oh, ow, kh, kw, stride, pad)?;
    debug_assert_eq!((g.oh, g.ow), (h, w));
    Ok((b, c, o, g))
}

pub fn conv_transpose2d<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let (b, c, o, g) = conv_transpose_window(input, kernel, stride, pad)?;
    let p = g.positions();
    let xmat = batch_major_to_channel_major(input.data(), b, c, p);
    let mut col = vec![T::zero(); g.rows() * b * p];
    matmul(g.rows(), c, b * p, kernel.data(), true, &xmat, false, &mut col, false);
    let mut out = vec![T::zero(); b * o * g.h * g.w];
    col2im(&col, b, &g, &mut out);
    Tensor::new(&[b, o, g.h, g.w], out)
}

pub fn conv_transpose2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_input: bool,
    need_kernel: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (b, c, _o, g) = conv_transpose_window(input, kernel, stride, pad)?;
    let p = g.positions();
    let dcol = im2col(grad_out.data(), b, &g);
    let dx = if need_input {
        let mut dxm = vec![T::zero(); c * b * p];
        matmul(c, g.rows(), b * p, kernel.data(), false, &dcol, false, &mut dxm, false);
        Some(Tensor::new(input.shape(), channel_major_to_batch_major(&dxm, b, c, p))?)
    } else {
        None
    };
    let dk = if need_kernel {
        let xmat = batch_major_to_channel_major(input.data(), b, c, p);
        let mut dk = vec![T::zero(); kernel.len()];
        matmul(c, b * p, g.rows(), &xmat, false, &dcol, true, &mut dk, false);
        Some(Tensor::new(kernel.shape(), dk)?)
    } else {
        None
    };
    Ok((dx, dk))
}

/// Adds `bias[C]` to every pixel of channel `C`.
pub fn add_channel_bias<T: Scalar>(input: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, p) = channel_layout(input)?;
    if bias.shape() != [c] {
        return Err(shape_err!("bias shape {:?} does not match {c} channels", bias.shape()));
    }
    let mut out = input.clone();
    for bi in 0..b {
        for (ci, &bv) in bias.data().iter().enumerate() {
            for v in &mut out.data_mut()[(bi * c + ci) * p..][..p] {
                *v += bv;
            }
        }
    }
    Ok(out)
}

pub fn channel_bias_backward<T: Scalar>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, p) = channel_layout(grad_out)?;
    let mut acc = vec![0f64; c];
    for bi in 0..b {
        for (ci, a) in acc.iter_mut().enumerate() {
            *a += grad_out.data()[(bi * c + ci) * p..][..p]
                .iter()
                .map(|v| v.to_f64().unwrap())
                .sum::<f64>();
        }
    }
    Tensor::new(&[c], acc.into_iter().map(T::from_f64_lossy).collect())
}

fn channel_layout<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if t.rank() < 2 {
        return Err(shape_err!("expected [B, C, ...], got {:?}", t.shape()));
    }
    Ok((t.shape()[0], t.shape()[1], t.shape()[2..].iter().product()))
}

/// Max pooling; returns the pooled tensor and, per output element, the flat
/// input index it was taken from. Ties go to the first index in row-major
/// order.
pub fn max_pool2d<T: Scalar>(input: &Tensor<T>, kernel: usize, stride: usize) -> Result<(Tensor<T>, Vec<u32>)> {
    let [b, c, h, w] = input.dims4()?;
    let (Some(oh), Some(ow)) = (pool_out_extent(h, kernel, stride), pool_out_extent(w, kernel, stride)) else {
        return Err(shape_err!(
            "max_pool2d: kernel {kernel} stride {stride} does not fit a {h}x{w} input"
        ));
    };
    let x = input.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut arg = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for i in 0..kernel {
                    for j in 0..kernel {
                        let idx = base + (oy * stride + i) * w + ox * stride + j;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    Ok((Tensor::new(&[b, c, oh, ow], out)?, arg))
}

pub fn max_pool2d_backward<T: Scalar>(grad_out: &Tensor<T>, argmax: &[u32], input_shape: &[usize]) -> Result<Tensor<T>> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&g, &i) in grad_out.data().iter().zip(argmax) {
        d[i as usize] += g;
    }
    Ok(dx)
}

/// `x[B, F] · w[F, G] + bias[G]`.
pub fn dense<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, f] = input.dims2()?;
    let [wf, g] = weight.dims2()?;
    if f != wf || bias.shape() != [g] {
        return Err(shape_err!(
            "dense: input {:?}, weight {:?}, bias {:?} do not chain",
            input.shape(),
            weight.shape(),
            bias.shape()
        ));
    }
    let mut out = Vec::with_capacity(b * g);
    for _ in 0..b {
        out.extend_from_slice(bias.data());
    }
    matmul(b, f, g, input.data(), false, weight.data(), false, &mut out, true);
    Tensor::new(&[b, g], out)
}

/// Gradients of [`dense`]: `(d input, d weight, d bias)`.
#[allow(clippy::type_complexity)]
pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
    need_params: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>)> {
    let [b, f] = input.dims2()?;
    let [_, g] = weight.dims2()?;
    let dx = if need_input {
        let mut dx = vec![T::zero(); b * f];
        matmul(b, g, f, grad_out.data(), false, weight.data(), true, &mut dx, false);
        Some(Tensor::new(&[b, f], dx)?)
    } else {
        None
    };
    let (dw, db) = if need_params {
        let mut dw = vec![T::zero(); f * g];
        matmul(f, b, g, input.data(), true, grad_out.data(), false, &mut dw, false);
        let db = (0..g)
            .map(|j| {
                T::from_f64_lossy((0..b).map(|r| grad_out.data()[r * g + j].to_f64().unwrap()).sum())
            })
            .collect();
        (Some(Tensor::new(&[f, g], dw)?), Some(Tensor::new(&[g], db)?))
    } else {
        (None, None)
    };
    Ok((dx, dw, db))
}

/// Linear-interpolation taps for resizing `n` samples to `m` with the end
/// points aligned: `(lower index, upper index, upper weight)`.
fn align_corners_taps(n: usize, m: usize) -> Vec<(usize, usize, f64)> {
    (0..m)
        .map(|o| {
            if m == 1 || n == 1 {
                return (0, 0, 0.0);
            }
            let pos = o as f64 * (n - 1) as f64 / (m - 1) as f64;
            let lo = (pos.floor() as usize).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Bilinear resize of every plane of `x[B, C, H, W]` with corner alignment.
pub fn resize_bilinear<T: Scalar>(input: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let [b, c, h, w] = input.dims4()?;
    if oh == 0 || ow == 0 {
        return Err(shape_err!("resize target must be positive, got {oh}x{ow}"));
    }
    let ty = align_corners_taps(h, oh);
    let tx = align_corners_taps(w, ow);
    let x = input.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let src = &x[plane * h * w..][..h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let at = |yy: usize, xx: usize| src[yy * w + xx].to_f64().unwrap();
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(T::from_f64_lossy(top * (1.0 - fy) + bot * fy));
            }
        }
    }
    Tensor::new(&[b, c, oh, ow], out)
}

pub fn resize_bilinear_backward<T: Scalar>(grad_out: &Tensor<T>, input_shape: &[usize]) -> Result<Tensor<T>> {
    let [b, c, oh, ow] = grad_out.dims4()?;
    let (h, w) = (input_shape[2], input_shape[3]);
    let ty = align_corners_taps(h, oh);
    let tx = align_corners_taps(w, ow);
    let mut acc = vec![0f64; b * c * h * w];
    let g = grad_out.data();
    for plane in 0..b * c {
        let dst = &mut acc[plane * h * w..][..h * w];
        let src = &g[plane * oh * ow..][..oh * ow];
        for (yo, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (xo, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = src[yo * ow + xo].to_f64().unwrap();
                dst[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += v * (1.0 - fy) * fx;
                dst[y1 * w + x0] += v * fy * (1.0 - fx);
                dst[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    Tensor::new(input_shape, acc.into_iter().map(T::from_f64_lossy).collect())
}

/// Per-row softmax of `[B, K]` logits, max-subtracted.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<f64>> {
    let [b, k] = logits.dims2()?;
    let mut probs = Vec::with_capacity(b * k);
    for r in 0..b {
        let row: Vec<f64> = logits.data()[r * k..][..k].iter().map(|v| v.to_f64().unwrap()).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        probs.extend(row.iter().map(|v| (v - m).exp() / z));
    }
    Ok(probs)
}
