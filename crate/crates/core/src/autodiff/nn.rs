//! Convolutional-network primitives.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{accumulate, accumulate_with, Graph, Node, Op, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::{matmul, Real};
use crate::tensor::Tensor;

/// Which statistics batch normalization uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with the running statistics.
    Eval,
}

/// Running per-channel statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> BatchNormStats<T> {
    pub const MOMENTUM: f64 = 0.9;

    pub fn new(channels: usize) -> Self {
        Self { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }

    /// `running <- 0.9 * running + 0.1 * batch`.
    pub fn update(&mut self, batch_mean: &[T], batch_var: &[T]) {
        let m = T::of(Self::MOMENTUM);
        let one_m = T::one() - m;
        for (r, &b) in self.mean.iter_mut().zip(batch_mean) {
            *r = m * *r + one_m * b;
        }
        for (r, &b) in self.var.iter_mut().zip(batch_var) {
            *r = m * *r + one_m * b;
        }
    }
}

/// Batch statistics produced by a training-mode batch norm: per-channel mean
/// and unbiased variance, for the caller to fold into running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

fn dims4(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::shape(op, format!("expected a rank-4 tensor, got {shape:?}"))),
    }
}

/// Output extent of a sliding window; `None` when the window does not fit.
fn out_extent(size: usize, window: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    (padded >= window).then(|| (padded - window) / stride + 1)
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Output columns `ox` whose input column `ox*stride + kx - pad` lies
    /// inside the image, as a half-open range.
    fn valid_ox(&self, kx: usize) -> (usize, usize) {
        let lo = if self.pad > kx { (self.pad - kx).div_ceil(self.stride) } else { 0 };
        let hi = if self.w + self.pad > kx { (self.w + self.pad - kx).div_ceil(self.stride).min(self.ow) } else { 0 };
        (lo.min(hi), hi)
    }

    /// Unrolls one `C x H x W` image into a `(C*kh*kw) x (oh*ow)` matrix.
    fn im2col<T: Real>(&self, img: &[T], cols: &mut [T]) {
        let p = self.cols();
        for c in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let (lo, hi) = self.valid_ox(kx);
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &img[(c * self.h + iy as usize) * self.w..][..self.w];
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        let start = lo * self.stride + kx - self.pad;
                        if self.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        } else {
                            for (k, v) in line[lo..hi].iter_mut().enumerate() {
                                *v = src[start + k * self.stride];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters column gradients back onto the image.
    fn col2im<T: Real>(&self, cols: &[T], img: &mut [T]) {
        let p = self.cols();
        for c in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    let (lo, hi) = self.valid_ox(kx);
                    if lo >= hi {
                        continue;
                    }
                    let start = lo * self.stride + kx - self.pad;
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut img[(c * self.h + iy as usize) * self.w..][..self.w];
                        let line = &src[oy * self.ow + lo..oy * self.ow + hi];
                        if self.stride == 1 {
                            for (d, &v) in dst[start..start + line.len()].iter_mut().zip(line) {
                                *d += v;
                            }
                        } else {
                            for (k, &v) in line.iter().enumerate() {
                                dst[start + k * self.stride] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_geom(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Result<(usize, usize, ConvGeom)> {
    let [n, c, h, w] = dims4("conv2d", x)?;
    let [m, kc, kh, kw] = dims4("conv2d", k)?;
    if kc != c {
        return Err(Error::shape("conv2d", format!("input has {c} channels but kernel {k:?} expects {kc}")));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be at least 1"));
    }
    let (Some(oh), Some(ow)) = (out_extent(h, kh, stride, pad), out_extent(w, kw, stride, pad)) else {
        return Err(Error::shape(
            "conv2d",
            format!("{kh}x{kw} kernel does not fit a {h}x{w} input with padding {pad}"),
        ));
    };
    Ok((n, m, ConvGeom { c, h, w, kh, kw, oh, ow, stride, pad }))
}

impl<T: Real> Graph<T> {
    /// 2-D cross-correlation with zero padding, `[N,C,H,W] * [M,C,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, m, geom) = conv_geom(self.shape(x), self.shape(kernel), stride, pad)?;
        let (rows, p) = (geom.rows(), geom.cols());
        let img_len = geom.c * geom.h * geom.w;
        let mut out = vec![T::zero(); n * m * p];
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * p] };
        let xv = self.value(x).data();
        let kv = self.value(kernel).data();
        for (img, dst) in xv.chunks_exact(img_len).zip(out.chunks_exact_mut(m * p)) {
            let src = if geom.is_pointwise() {
                img
            } else {
                geom.im2col(img, &mut cols);
                &cols
            };
            matmul(m, rows, p, kv, false, src, false, dst, false);
        }
        let value = Tensor::new(&[n, m, geom.oh, geom.ow], out)?;
        Ok(self.push(value, Op::Conv2d { x, kernel, stride, pad }, &[x, kernel]))
    }

    /// Max pooling without padding. Ties route the gradient to the first
    /// maximal element in row-major order.
    pub fn max_pool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let [n, c, h, w] = dims4("max_pool2d", self.shape(x))?;
        if window == 0 || stride == 0 {
            return Err(Error::invalid("max_pool2d", "window and stride must be at least 1"));
        }
        if window > h || window > w {
            return Err(Error::invalid("max_pool2d", format!("window {window} exceeds spatial extent {h}x{w}")));
        }
        let oh = (h - window) / stride + 1;
        let ow = (w - window) / stride + 1;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for dy in 0..window {
                        for dx in 0..window {
                            let i = base + (oy * stride + dy) * w + ox * stride + dx;
                            if xv[i] > xv[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool2d { x, argmax }, &[x]))
    }

    /// Mean over the spatial extent: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4("global_avg_pool", self.shape(x))?;
        let inv = T::one() / T::of((h * w) as f64);
        let out = self.value(x).data().chunks_exact(h * w).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
        let value = Tensor::new(&[n, c], out)?;
        Ok(self.push(value, Op::GlobalAvgPool { x }, &[x]))
    }

    /// `x W + b` with `x: [N,A]`, `W: [A,B]`, `b: [B]`.
    pub fn dense(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(weight), self.shape(bias));
        let (&[n, a], &[wa, b], &[bb]) = (xs, ws, bs) else {
            return Err(Error::shape("dense", format!("expected [N,A]x[A,B]+[B], got {xs:?}x{ws:?}+{bs:?}")));
        };
        if a != wa || b != bb {
            return Err(Error::shape("dense", format!("expected [N,A]x[A,B]+[B], got {xs:?}x{ws:?}+{bs:?}")));
        }
        let mut out = vec![T::zero(); n * b];
        for row in out.chunks_exact_mut(b) {
            row.copy_from_slice(self.value(bias).data());
        }
        matmul(n, a, b, self.value(x).data(), false, self.value(weight).data(), false, &mut out, true);
        let value = Tensor::new(&[n, b], out)?;
        Ok(self.push(value, Op::Dense { x, weight, bias }, &[x, weight, bias]))
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: T) -> Result<Var> {
        if !(alpha >= T::zero() && alpha < T::one()) {
            return Err(Error::invalid("leaky_relu", format!("alpha {alpha} outside [0, 1)")));
        }
        let out = self.value(x).data().iter().map(|&v| if v > T::zero() { v } else { alpha * v }).collect();
        let value = Tensor::new(self.shape(x), out)?;
        Ok(self.push(value, Op::LeakyRelu { x, alpha }, &[x]))
    }

    /// Batch normalization over every axis except the channel axis 1.
    ///
    /// In [`NormMode::Train`] the batch statistics are used and returned so the
    /// caller can update its running statistics; [`NormMode::Eval`] reads
    /// `running` and returns no moments.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode,
        running: &BatchNormStats<T>,
        eps: T,
    ) -> Result<(Var, Option<BatchMoments<T>>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("batch_norm", format!("expected [N,C,...], got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!("gamma/beta must be [{c}], got {:?}/{:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        if running.mean.len() != c || running.var.len() != c {
            return Err(Error::shape("batch_norm", format!("running statistics must cover {c} channels")));
        }
        let count = n * spatial;
        let xv = self.value(x).data();
        let (mean, var_biased, moments) = match mode {
            NormMode::Train => {
                if n < 2 {
                    return Err(Error::invalid("batch_norm", "training mode needs at least 2 samples"));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for (ch, (mu, v)) in mean.iter_mut().zip(var.iter_mut()).enumerate() {
                    let mut s = T::zero();
                    for b in 0..n {
                        s += xv[(b * c + ch) * spatial..][..spatial].iter().copied().sum::<T>();
                    }
                    *mu = s / T::of(count as f64);
                    let mut q = T::zero();
                    for b in 0..n {
                        for &e in &xv[(b * c + ch) * spatial..][..spatial] {
                            q += (e - *mu) * (e - *mu);
                        }
                    }
                    *v = q / T::of(count as f64);
                }
                let unbiased = T::of(count as f64 / (count - 1) as f64);
                let moments = BatchMoments { mean: mean.clone(), var: var.iter().map(|&v| v * unbiased).collect() };
                (mean, var, Some(moments))
            }
            NormMode::Eval => (running.mean.clone(), running.var.clone(), None),
        };
        let inv_std: Vec<T> = var_biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * spatial;
                for i in off..off + spatial {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gv[ch] * h + bv[ch];
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        let batch_stats = mode == NormMode::Train;
        let var = self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats }, &[x, gamma, beta]);
        Ok((var, moments))
    }

    /// Inverted dropout. Identity (the same node) in eval mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: Option<&mut Rng>, mode: NormMode) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid("dropout", format!("rate {rate} outside [0, 1)")));
        }
        if mode == NormMode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let rng = rng.ok_or_else(|| Error::invalid("dropout", "training mode needs a random stream"))?;
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> =
            (0..self.value(x).numel()).map(|_| if rng.uniform() < rate { T::zero() } else { keep }).collect();
        let mask = self.constant(Tensor::new(self.shape(x), mask)?);
        self.mul(x, mask)
    }

    /// Multiplies channel `c` (axis 1) by `scale[c]`.
    pub fn channel_scale(&mut self, x: Var, scale: &[T]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || shape[1] != scale.len() {
            return Err(Error::shape("channel_scale", format!("{} channel factors for input {shape:?}", scale.len())));
        }
        let spatial: usize = shape[2..].iter().product();
        let c = shape[1];
        let out = self.value(x).data().iter().enumerate().map(|(i, &v)| v * scale[(i / spatial) % c]).collect();
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::ChannelScale { x, scale: scale.to_vec() }, &[x]))
    }

    /// Row-wise softmax of `[N,K]` logits, max-shifted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let &[_, k] = self.shape(x) else {
            return Err(Error::shape("softmax", format!("expected [N,K], got {:?}", self.shape(x))));
        };
        if k < 2 {
            return Err(Error::invalid("softmax", "need at least 2 classes"));
        }
        let value = Tensor::new(self.shape(x), softmax_rows(self.value(x).data(), k))?;
        Ok(self.push(value, Op::Softmax { x }, &[x]))
    }
}

pub(crate) fn softmax_rows<T: Real>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut total = T::zero();
        for &v in row {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= total);
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(super) fn conv2d_backward<T: Real>(
    grads: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    x: Var,
    kernel: Var,
    stride: usize,
    pad: usize,
    out: &Tensor<T>,
    g: &[T],
) {
    let xt = &nodes[x.0].value;
    let kt = &nodes[kernel.0].value;
    let (_, m, geom) = conv_geom(xt.shape(), kt.shape(), stride, pad).expect("validated in forward");
    debug_assert_eq!(out.numel(), g.len());
    let (rows, p) = (geom.rows(), geom.cols());
    let img_len = geom.c * geom.h * geom.w;
    let want_x = nodes[x.0].requires_grad;
    let want_k = nodes[kernel.0].requires_grad;
    let mut cols = vec![T::zero(); rows * p];
    if want_k {
        let mut dk = vec![T::zero(); kt.numel()];
        for (img, go) in xt.data().chunks_exact(img_len).zip(g.chunks_exact(m * p)) {
            let src = if geom.is_pointwise() {
                img
            } else {
                geom.im2col(img, &mut cols);
                &cols
            };
            matmul(m, p, rows, go, false, src, true, &mut dk, true);
        }
        accumulate(grads, nodes, kernel, &dk);
    }
    if want_x {
        let mut dx = vec![T::zero(); xt.numel()];
        for (dimg, go) in dx.chunks_exact_mut(img_len).zip(g.chunks_exact(m * p)) {
            if geom.is_pointwise() {
                matmul(rows, m, p, kt.data(), true, go, false, dimg, true);
            } else {
                matmul(rows, m, p, kt.data(), true, go, false, &mut cols, false);
                geom.col2im(&cols, dimg);
            }
        }
        accumulate(grads, nodes, x, &dx);
    }
}

pub(super) fn gap_backward<T: Real>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], x: Var, g: &[T]) {
    let shape = nodes[x.0].value.shape();
    let spatial = shape[2] * shape[3];
    let inv = T::one() / T::of(spatial as f64);
    accumulate_with(
        grads,
        nodes,
        x,
        |dx| {
            for (plane, &gv) in dx.chunks_exact_mut(spatial).zip(g) {
                plane.iter_mut().for_each(|d| *d += gv * inv);
            }
        },
        nodes[x.0].value.numel(),
    );
}

pub(super) fn dense_backward<T: Real>(
    grads: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    x: Var,
    weight: Var,
    bias: Var,
    g: &[T],
) {
    let xv = &nodes[x.0].value;
    let wv = &nodes[weight.0].value;
    let (n, a) = (xv.shape()[0], xv.shape()[1]);
    let b = wv.shape()[1];
    if nodes[x.0].requires_grad {
        let mut dx = vec![T::zero(); n * a];
        matmul(n, b, a, g, false, wv.data(), true, &mut dx, false);
        accumulate(grads, nodes, x, &dx);
    }
    if nodes[weight.0].requires_grad {
        let mut dw = vec![T::zero(); a * b];
        matmul(a, n, b, xv.data(), true, g, false, &mut dw, false);
        accumulate(grads, nodes, weight, &dw);
    }
    accumulate_with(
        grads,
        nodes,
        bias,
        |db| {
            for row in g.chunks_exact(b) {
                db.iter_mut().zip(row).for_each(|(d, &r)| *d += r);
            }
        },
        b,
    );
}

#[allow(clippy::too_many_arguments)]
pub(super) fn batch_norm_backward<T: Real>(
    grads: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &[T],
    inv_std: &[T],
    batch_stats: bool,
    g: &[T],
) {
    let shape = nodes[x.0].value.shape();
    let (n, c) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    let count = T::of((n * spatial) as f64);
    let gv = nodes[gamma.0].value.data();
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * spatial;
            for i in off..off + spatial {
                sum_g[ch] += g[i];
                sum_gx[ch] += g[i] * xhat[i];
            }
        }
    }
    accumulate(grads, nodes, gamma, &sum_gx);
    accumulate(grads, nodes, beta, &sum_g);
    accumulate_with(
        grads,
        nodes,
        x,
        |dx| {
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * spatial;
                    let k = gv[ch] * inv_std[ch];
                    for i in off..off + spatial {
                        dx[i] += if batch_stats {
                            k * (g[i] - (sum_g[ch] + xhat[i] * sum_gx[ch]) / count)
                        } else {
                            k * g[i]
                        };
                    }
                }
            }
        },
        g.len(),
    );
}

pub(super) fn channel_scale_backward<T: Real>(
    grads: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    x: Var,
    scale: &[T],
    g: &[T],
) {
    let shape = nodes[x.0].value.shape();
    let spatial: usize = shape[2..].iter().product();
    let c = shape[1];
    accumulate_with(
        grads,
        nodes,
        x,
        |dx| {
            for (i, (d, &gv)) in dx.iter_mut().zip(g).enumerate() {
                *d += gv * scale[(i / spatial) % c];
            }
        },
        g.len(),
    );
}

pub(super) fn softmax_backward<T: Real>(
    grads: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    x: Var,
    y: &Tensor<T>,
    g: &[T],
) {
    let k = y.shape()[1];
    accumulate_with(
        grads,
        nodes,
        x,
        |dx| {
            for ((drow, yrow), grow) in dx.chunks_exact_mut(k).zip(y.data().chunks_exact(k)).zip(g.chunks_exact(k)) {
                let dot: T = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                for ((d, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                    *d += yv * (gv - dot);
                }
            }
        },
        g.len(),
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = g.constant(t(&[2, 3, 4, 4], &data));
        // 1x1 identity across channels
        let mut k = vec![0.0; 9];
        for c in 0..3 {
            k[c * 3 + c] = 1.0;
        }
        let k = g.constant(t(&[3, 3, 1, 1], &k));
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), data.as_slice());
    }

    #[test]
    fn conv_hand_average() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let k = g.constant(t(&[1, 1, 2, 2], &[0.25; 4]));
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[2.5]);
    }

    #[test]
    fn conv_same_padding_shape() {
        let mut g = Graph::<f32>::no_grad();
        let x = g.constant(Tensor::zeros(&[2, 3, 32, 32]));
        let k = g.constant(Tensor::zeros(&[128, 3, 3, 3]));
        let y = g.conv2d(x, k, 1, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 128, 32, 32]);
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_oversized_kernel() {
        let mut g = Graph::<f32>::no_grad();
        let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let k = g.constant(Tensor::zeros(&[2, 2, 3, 3]));
        let err = g.conv2d(x, k, 1, 0).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }), "{err}");
        let big = g.constant(Tensor::zeros(&[2, 3, 7, 7]));
        assert!(g.conv2d(x, big, 1, 1).is_err());
        assert!(g.conv2d(x, big, 1, 2).is_ok());
        let k3 = g.constant(Tensor::zeros(&[2, 3, 3, 3]));
        assert!(g.conv2d(x, k3, 0, 0).is_err());
    }

    #[test]
    fn strided_conv_matches_direct_sum() {
        let mut g = Graph::<f64>::new();
        let xs: Vec<f64> = (0..2 * 5 * 5).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
        let ks: Vec<f64> = (0..3 * 2 * 3 * 3).map(|i| ((i * 5 % 7) as f64) * 0.1 - 0.3).collect();
        let x = g.constant(t(&[1, 2, 5, 5], &xs));
        let k = g.constant(t(&[3, 2, 3, 3], &ks));
        let y = g.conv2d(x, k, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 3, 3]);
        let yv = g.value(y).data();
        for m in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut s = 0.0;
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    s += xs[(c * 5 + iy as usize) * 5 + ix as usize]
                                        * ks[((m * 2 + c) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                    }
                    assert!((yv[(m * 3 + oy) * 3 + ox] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn max_pool_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.max_pool2d(x, 2, 2).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);

        let c = g.param(t(&[1, 1, 6, 6], &[1.5; 36]));
        let y = g.max_pool2d(c, 2, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 3, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 1.5));
        // ties: gradient lands on the first element of each window
        let s = g.sum(y);
        g.backward(s).unwrap();
        let grad = g.grad(c);
        assert_eq!(grad.data()[0], 1.0);
        assert_eq!(grad.data()[1], 0.0);
        assert_eq!(grad.data()[6], 0.0);
        assert_eq!(grad.data()[2], 1.0);

        assert!(g.max_pool2d(x, 3, 1).is_err());
    }

    #[test]
    fn global_avg_pool_means() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 2, 2, 2], &[1.0, 3.0, 5.0, 7.0, 2.0, 2.0, 2.0, 2.0]));
        let y = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 2.0]);
        let big = g.constant(Tensor::zeros(&[100, 128, 6, 6]));
        let y = g.global_avg_pool(big).unwrap();
        assert_eq!(g.shape(y), &[100, 128]);
    }

    #[test]
    fn dense_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = g.constant(t(&[2, 1], &[1.0, 1.0]));
        let b = g.constant(t(&[1], &[0.5]));
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.5]);

        let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let zero = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.dense(x, eye, zero).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);
        assert!(g.dense(x, b, zero).is_err());
    }

    #[test]
    fn leaky_relu_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[-2.0, 3.0, 0.0]));
        let y = g.leaky_relu(x, 0.1).unwrap();
        assert!((g.value(y).data()[0] + 0.2).abs() < 1e-15);
        assert_eq!(g.value(y).data()[1], 3.0);
        let s = g.sum(y);
        g.backward(s).unwrap();
        // derivative at exactly 0 is alpha
        assert_eq!(g.grad(x).data(), &[0.1, 1.0, 0.1]);
        let r = g.leaky_relu(x, 0.0).unwrap();
        assert_eq!(g.value(r).data()[0], 0.0);
        assert!(g.leaky_relu(x, 1.0).is_err());
    }

    #[test]
    fn batch_norm_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 1], &[0.0, 2.0]));
        let gamma = g.constant(t(&[1], &[1.0]));
        let beta = g.constant(t(&[1], &[0.0]));
        let stats = BatchNormStats::new(1);
        let (y, moments) = g.batch_norm(x, gamma, beta, NormMode::Train, &stats, 0.0).unwrap();
        assert_eq!(g.value(y).data(), &[-1.0, 1.0]);
        let moments = moments.unwrap();
        assert_eq!(moments.mean, vec![1.0]);
        assert_eq!(moments.var, vec![2.0]);

        let shift = g.constant(t(&[1], &[5.0]));
        let xs = g.constant(t(&[4, 1, 1, 2], &[0.3, -1.0, 2.0, 0.7, 1.1, -0.4, 0.0, 3.0]));
        let (y, _) = g.batch_norm(xs, gamma, shift, NormMode::Train, &stats, 1e-5).unwrap();
        let mean: f64 = g.value(y).data().iter().sum::<f64>() / 8.0;
        assert!((mean - 5.0).abs() < 1e-12);

        let one = g.constant(t(&[1, 1], &[3.0]));
        assert!(g.batch_norm(one, gamma, beta, NormMode::Train, &stats, 1e-5).is_err());
        let (e, m) = g.batch_norm(one, gamma, beta, NormMode::Eval, &stats, 0.0).unwrap();
        assert!(m.is_none());
        assert_eq!(g.value(e).data(), &[3.0]);
    }

    #[test]
    fn batch_norm_fixed_point() {
        let mut g = Graph::<f64>::new();
        // zero mean, unit (biased) variance per channel
        let x = g.constant(t(&[4, 1], &[1.0, -1.0, 1.0, -1.0]));
        let gamma = g.constant(t(&[1], &[1.0]));
        let beta = g.constant(t(&[1], &[0.0]));
        let (y, _) = g.batch_norm(x, gamma, beta, NormMode::Train, &BatchNormStats::new(1), 1e-5).unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(x).data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn running_stats_momentum() {
        let mut s = BatchNormStats::<f64>::new(1);
        s.update(&[1.0], &[3.0]);
        assert!((s.mean[0] - 0.1).abs() < 1e-15);
        assert!((s.var[0] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn dropout_modes() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::full(&[100_000], 1.0));
        let mut rng = Rng::new(9);
        assert_eq!(g.dropout(x, 0.5, None, NormMode::Eval).unwrap(), x);
        assert_eq!(g.dropout(x, 0.0, Some(&mut rng), NormMode::Train).unwrap(), x);
        assert!(g.dropout(x, 1.0, Some(&mut rng), NormMode::Train).is_err());
        let y = g.dropout(x, 0.5, Some(&mut rng), NormMode::Train).unwrap();
        let kept = g.value(y).data().iter().filter(|&&v| v != 0.0).count() as f64 / 1e5;
        assert!((kept - 0.5).abs() < 0.01, "{kept}");
        assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 2], &[0.0, 0.0, 2f64.ln(), 0.0]));
        let y = g.softmax(x).unwrap();
        let v = g.value(y).data().to_vec();
        assert_eq!(&v[..2], &[0.5, 0.5]);
        assert!((v[2] - 2.0 / 3.0).abs() < 1e-15 && (v[3] - 1.0 / 3.0).abs() < 1e-15);
        let shifted = g.constant(t(&[2, 2], &[100.0, 100.0, 2f64.ln() - 7.0, -7.0]));
        let ys = g.softmax(shifted).unwrap();
        for (a, b) in g.value(ys).data().iter().zip(&v) {
            assert!((a - b).abs() < 1e-12);
        }
        let one = g.constant(t(&[2, 1], &[0.0, 1.0]));
        assert!(g.softmax(one).is_err());
    }

    #[test]
    fn channel_scale_zeroes_selected_channels() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.channel_scale(x, &[1.0, 0.0]).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 0.0, 0.0]);
    }
}
