//! Layer definitions and their forward/backward kernels.
//!
//! Every kernel works on a single sample. Inner loops are either element-wise
//! `axpy` updates or dot products with a fixed eight-lane accumulation order,
//! so vectorisation never changes a result.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    Maxpool2d {
        window: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Flatten,
}

/// Per-layer state kept from the forward pass for backpropagation.
#[derive(Debug, Clone)]
pub(crate) enum LayerCache {
    None,
    /// im2col matrix: `[K][P]` when the output has at least `WIDE_ROWS`
    /// positions, transposed `[P][K]` otherwise.
    Columns(Vec<f32>),
    /// Flat input index chosen by each pooled output.
    Argmax(Vec<usize>),
}

impl LayerSpec {
    pub fn conv3x3(in_channels: usize, out_channels: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::Maxpool2d { .. } => "maxpool2d",
            LayerSpec::GlobalAvgPool => "global-avg-pool",
            LayerSpec::Flatten => "flatten",
        }
    }

    /// Number of trainable parameters (weights followed by biases).
    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, outputs } => inputs * outputs + outputs,
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => out_channels * in_channels * kernel * kernel + out_channels,
            _ => 0,
        }
    }

    /// Fan-in used by Kaiming initialisation; zero for parameter-free layers.
    pub fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, .. } => inputs,
            LayerSpec::Conv2d {
                in_channels,
                kernel,
                ..
            } => in_channels * kernel * kernel,
            _ => 0,
        }
    }

    /// Number of weights (the biases follow them in the parameter slice).
    pub fn weight_count(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, outputs } => inputs * outputs,
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => out_channels * in_channels * kernel * kernel,
            _ => 0,
        }
    }

    /// Output shape for a given input shape, or an error describing the mismatch.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |why: String| {
            Err(Error::config(format!(
                "{} layer cannot take input {input:?}: {why}",
                self.name()
            )))
        };
        match *self {
            LayerSpec::Dense { inputs, outputs } => match input {
                [d] if *d == inputs => Ok(vec![outputs]),
                _ => bad(format!("expected [{inputs}]")),
            },
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => match input {
                [c, h, w] if *c == in_channels => {
                    if kernel == 0 || stride == 0 {
                        return bad("kernel and stride must be positive".into());
                    }
                    if h + 2 * padding < kernel || w + 2 * padding < kernel {
                        return bad(format!("kernel {kernel} larger than padded input"));
                    }
                    let ho = (h + 2 * padding - kernel) / stride + 1;
                    let wo = (w + 2 * padding - kernel) / stride + 1;
                    Ok(vec![out_channels, ho, wo])
                }
                _ => bad(format!("expected [{in_channels}, H, W]")),
            },
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Maxpool2d { window, stride } => match input {
                [c, h, w] => {
                    if window == 0 || stride == 0 || *h < window || *w < window {
                        return bad(format!("window {window} does not fit"));
                    }
                    Ok(vec![*c, (h - window) / stride + 1, (w - window) / stride + 1])
                }
                _ => bad("expected [C, H, W]".into()),
            },
            LayerSpec::GlobalAvgPool => match input {
                [c, _, _] => Ok(vec![*c]),
                _ => bad("expected [C, H, W]".into()),
            },
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    /// Forward one sample. `out_shape` must come from [`LayerSpec::output_shape`].
    pub(crate) fn forward(
        &self,
        params: &[f32],
        input: &Tensor,
        out_shape: &[usize],
        keep_cache: bool,
    ) -> (Tensor, LayerCache) {
        #[cfg(target_arch = "x86_64")]
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2.
            return unsafe { wide::forward(self, params, input, out_shape, keep_cache) };
        }
        self.forward_impl(params, input, out_shape, keep_cache)
    }

    #[inline(always)]
    fn forward_impl(
        &self,
        params: &[f32],
        input: &Tensor,
        out_shape: &[usize],
        keep_cache: bool,
    ) -> (Tensor, LayerCache) {
        let x = input.data();
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                let (w, b) = params.split_at(inputs * outputs);
                let mut out = b.to_vec();
                for (i, &xi) in x.iter().enumerate() {
                    axpy(xi, &w[i * outputs..(i + 1) * outputs], &mut out);
                }
                (Tensor::from_parts(out_shape.to_vec(), out), LayerCache::None)
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let (h, w) = (input.shape()[1], input.shape()[2]);
                let (ho, wo) = (out_shape[1], out_shape[2]);
                let geo = ConvGeometry {
                    in_channels,
                    h,
                    w,
                    kernel,
                    stride,
                    padding,
                    ho,
                    wo,
                };
                let (k, p) = (geo.k(), geo.p());
                let (wt, b) = params.split_at(out_channels * k);
                let mut out = vec![0.0f32; out_channels * p];
                let cols = if p >= WIDE_ROWS {
                    let cols = geo.im2col(x);
                    for co in 0..out_channels {
                        let row = &mut out[co * p..(co + 1) * p];
                        row.fill(b[co]);
                        let wrow = &wt[co * k..(co + 1) * k];
                        for (kk, &wv) in wrow.iter().enumerate() {
                            axpy(wv, &cols[kk * p..(kk + 1) * p], row);
                        }
                    }
                    cols
                } else {
                    // few output positions: one long dot product per output instead
                    let rows = transpose(&geo.im2col(x), k, p);
                    for co in 0..out_channels {
                        let wrow = &wt[co * k..(co + 1) * k];
                        for pp in 0..p {
                            out[co * p + pp] = b[co] + dot(wrow, &rows[pp * k..(pp + 1) * k]);
                        }
                    }
                    rows
                };
                let cache = if keep_cache {
                    LayerCache::Columns(cols)
                } else {
                    LayerCache::None
                };
                (Tensor::from_parts(out_shape.to_vec(), out), cache)
            }
            LayerSpec::Relu => {
                let out = x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
                (Tensor::from_parts(out_shape.to_vec(), out), LayerCache::None)
            }
            LayerSpec::Maxpool2d { window, stride } => {
                let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
                let (ho, wo) = (out_shape[1], out_shape[2]);
                let mut out = Vec::with_capacity(c * ho * wo);
                let mut arg = Vec::with_capacity(c * ho * wo);
                for ch in 0..c {
                    let base = ch * h * w;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut best = base + oy * stride * w + ox * stride;
                            for dy in 0..window {
                                for dx in 0..window {
                                    let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                                    if x[idx] > x[best] {
                                        best = idx;
                                    }
                                }
                            }
                            out.push(x[best]);
                            arg.push(best);
                        }
                    }
                }
                (
                    Tensor::from_parts(out_shape.to_vec(), out),
                    LayerCache::Argmax(arg),
                )
            }
            LayerSpec::GlobalAvgPool => {
                let (c, size) = input.channel_layout();
                let scale = 1.0 / size as f32;
                let out = (0..c)
                    .map(|ch| {
                        let mut s = 0.0f32;
                        for &v in &x[ch * size..(ch + 1) * size] {
                            s += v;
                        }
                        s * scale
                    })
                    .collect();
                (Tensor::from_parts(out_shape.to_vec(), out), LayerCache::None)
            }
            LayerSpec::Flatten => (
                Tensor::from_parts(out_shape.to_vec(), x.to_vec()),
                LayerCache::None,
            ),
        }
    }

    /// Backpropagate one sample.
    ///
    /// Parameter gradients are *added* into `grad_params`. The input gradient is
    /// only computed when `need_input_grad` is set.
    pub(crate) fn backward(
        &self,
        params: &[f32],
        input: &Tensor,
        cache: &LayerCache,
        grad_out: &[f32],
        grad_params: &mut [f32],
        need_input_grad: bool,
    ) -> Option<Vec<f32>> {
        #[cfg(target_arch = "x86_64")]
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2.
            return unsafe {
                wide::backward(self, params, input, cache, grad_out, grad_params, need_input_grad)
            };
        }
        self.backward_impl(params, input, cache, grad_out, grad_params, need_input_grad)
    }

    #[inline(always)]
    fn backward_impl(
        &self,
        params: &[f32],
        input: &Tensor,
        cache: &LayerCache,
        grad_out: &[f32],
        grad_params: &mut [f32],
        need_input_grad: bool,
    ) -> Option<Vec<f32>> {
        let x = input.data();
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                let (gw, gb) = grad_params.split_at_mut(inputs * outputs);
                for (i, &xi) in x.iter().enumerate() {
                    axpy(xi, grad_out, &mut gw[i * outputs..(i + 1) * outputs]);
                }
                for (b, &g) in gb.iter_mut().zip(grad_out) {
                    *b += g;
                }
                need_input_grad.then(|| {
                    let w = &params[..inputs * outputs];
                    (0..inputs)
                        .map(|i| dot(&w[i * outputs..(i + 1) * outputs], grad_out))
                        .collect()
                })
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let (h, w) = (input.shape()[1], input.shape()[2]);
                let geo = ConvGeometry {
                    in_channels,
                    h,
                    w,
                    kernel,
                    stride,
                    padding,
                    ho: (h + 2 * padding - kernel) / stride + 1,
                    wo: (w + 2 * padding - kernel) / stride + 1,
                };
                let (k, p) = (geo.k(), geo.p());
                let owned;
                let cols: &[f32] = match cache {
                    LayerCache::Columns(c) => c,
                    _ => {
                        owned = if p >= WIDE_ROWS {
                            geo.im2col(x)
                        } else {
                            transpose(&geo.im2col(x), k, p)
                        };
                        &owned
                    }
                };
                let (gw, gb) = grad_params.split_at_mut(out_channels * k);
                if p >= WIDE_ROWS {
                    for co in 0..out_channels {
                        let grow = &grad_out[co * p..(co + 1) * p];
                        for (kk, g) in gw[co * k..(co + 1) * k].iter_mut().enumerate() {
                            *g += dot(grow, &cols[kk * p..(kk + 1) * p]);
                        }
                    }
                } else {
                    // `cols` holds the transposed `[P][K]` layout here
                    let cols_t = cols;
                    for co in 0..out_channels {
                        let grow = &grad_out[co * p..(co + 1) * p];
                        let gwrow = &mut gw[co * k..(co + 1) * k];
                        for (pp, &g) in grow.iter().enumerate() {
                            axpy(g, &cols_t[pp * k..(pp + 1) * k], gwrow);
                        }
                    }
                }
                for co in 0..out_channels {
                    gb[co] += sum(&grad_out[co * p..(co + 1) * p]);
                }
                need_input_grad.then(|| {
                    let wt = &params[..out_channels * k];
                    let mut dcols_t = vec![0.0f32; p * k];
                    for pp in 0..p {
                        let drow = &mut dcols_t[pp * k..(pp + 1) * k];
                        for co in 0..out_channels {
                            axpy(grad_out[co * p + pp], &wt[co * k..(co + 1) * k], drow);
                        }
                    }
                    geo.col2im_transposed(&dcols_t)
                })
            }
            LayerSpec::Relu => need_input_grad.then(|| {
                x.iter()
                    .zip(grad_out)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect()
            }),
            LayerSpec::Maxpool2d { .. } => need_input_grad.then(|| {
                let LayerCache::Argmax(arg) = cache else {
                    unreachable!("maxpool forward always records argmax");
                };
                let mut dx = vec![0.0f32; x.len()];
                for (&idx, &g) in arg.iter().zip(grad_out) {
                    dx[idx] += g;
                }
                dx
            }),
            LayerSpec::GlobalAvgPool => need_input_grad.then(|| {
                let (c, size) = input.channel_layout();
                let scale = 1.0 / size as f32;
                let mut dx = Vec::with_capacity(c * size);
                for &g in grad_out.iter().take(c) {
                    dx.extend(std::iter::repeat(g * scale).take(size));
                }
                dx
            }),
            LayerSpec::Flatten => need_input_grad.then(|| grad_out.to_vec()),
        }
    }
}

/// AVX2 builds of the kernels. Only the vector width changes: every value is
/// still produced by the same sequence of `f32` operations, so results are
/// bit-identical to the baseline build.
#[cfg(target_arch = "x86_64")]
mod wide {
    use super::{LayerCache, LayerSpec};
    use crate::tensor::Tensor;

    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn forward(
        spec: &LayerSpec,
        params: &[f32],
        input: &Tensor,
        out_shape: &[usize],
        keep_cache: bool,
    ) -> (Tensor, LayerCache) {
        spec.forward_impl(params, input, out_shape, keep_cache)
    }

    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn backward(
        spec: &LayerSpec,
        params: &[f32],
        input: &Tensor,
        cache: &LayerCache,
        grad_out: &[f32],
        grad_params: &mut [f32],
        need_input_grad: bool,
    ) -> Option<Vec<f32>> {
        spec.backward_impl(params, input, cache, grad_out, grad_params, need_input_grad)
    }
}

struct ConvGeometry {
    in_channels: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    #[inline(always)]
    fn k(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    #[inline(always)]
    fn p(&self) -> usize {
        self.ho * self.wo
    }

    /// Output columns `[lo, hi)` whose source column `ox * stride + kx - padding`
    /// lies inside the image.
    #[inline(always)]
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(kx).div_ceil(self.stride);
        let hi = ((self.w + self.padding).saturating_sub(kx)).div_ceil(self.stride).min(self.wo);
        (lo, hi.max(lo))
    }

    #[inline(always)]
    fn source_row(&self, oy: usize, ky: usize) -> Option<usize> {
        (oy * self.stride + ky)
            .checked_sub(self.padding)
            .filter(|&iy| iy < self.h)
    }

    #[inline(always)]
    fn im2col(&self, x: &[f32]) -> Vec<f32> {
        let p = self.p();
        let mut cols = vec![0.0f32; self.k() * p];
        for ci in 0..self.in_channels {
            for ky in 0..self.kernel {
                for kx in 0..self.kernel {
                    let row = (ci * self.kernel + ky) * self.kernel + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..self.ho {
                        let Some(iy) = self.source_row(oy, ky) else { continue };
                        let src = &x[(ci * self.h + iy) * self.w..];
                        for ox in lo..hi {
                            dst[oy * self.wo + ox] = src[ox * self.stride + kx - self.padding];
                        }
                    }
                }
            }
        }
        cols
    }

    #[inline(always)]
    fn col2im_transposed(&self, dcols_t: &[f32]) -> Vec<f32> {
        let k = self.k();
        let mut dx = vec![0.0f32; self.in_channels * self.h * self.w];
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let drow = &dcols_t[(oy * self.wo + ox) * k..][..k];
                for ci in 0..self.in_channels {
                    for ky in 0..self.kernel {
                        let Some(iy) = self.source_row(oy, ky) else { continue };
                        let base = (ci * self.h + iy) * self.w;
                        for kx in 0..self.kernel {
                            let Some(ix) = (ox * self.stride + kx)
                                .checked_sub(self.padding)
                                .filter(|&ix| ix < self.w)
                            else {
                                continue;
                            };
                            dx[base + ix] += drow[(ci * self.kernel + ky) * self.kernel + kx];
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Output rows at or above this length make dot-product weight gradients worthwhile.
const WIDE_ROWS: usize = 64;

#[inline(always)]
fn transpose(m: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut t = vec![0.0f32; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = m[r * cols + c];
        }
    }
    t
}

#[inline(always)]
pub(crate) fn axpy(a: f32, x: &[f32], y: &mut [f32]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

const LANES: usize = 8;

/// Dot product with eight interleaved partial sums combined in a fixed order.
#[inline(always)]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f32; LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        let x: &[f32; LANES] = x.try_into().unwrap();
        let y: &[f32; LANES] = y.try_into().unwrap();
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = reduce(&acc);
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        s += x * y;
    }
    s
}

#[inline(always)]
fn sum(a: &[f32]) -> f32 {
    let mut acc = [0.0f32; LANES];
    let split = a.len() - a.len() % LANES;
    for c in a[..split].chunks_exact(LANES) {
        for l in 0..LANES {
            acc[l] += c[l];
        }
    }
    let mut s = reduce(&acc);
    for &v in &a[split..] {
        s += v;
    }
    s
}

#[inline(always)]
fn reduce(acc: &[f32; LANES]) -> f32 {
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))
}
