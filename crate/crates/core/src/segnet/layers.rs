//! Forward and backward kernels on channel-major activations.
//!
//! Activations are stored `[channel][batch][row][col]`, so a convolution over
//! the whole batch is one matrix product and concatenating along channels is
//! appending buffers.

use rand::Rng as _;

use super::real::{gemm, MatRef, Real};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Act<T> {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Act<T> {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            n,
            h,
            w,
            data: vec![T::zero(); c * n * h * w],
        }
    }

    /// Elements per channel.
    #[inline]
    pub fn plane(&self) -> usize {
        self.n * self.h * self.w
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn same_dims(&self, other: &Act<T>) -> bool {
        (self.c, self.n, self.h, self.w) == (other.c, other.n, other.h, other.w)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Unfolds a `k x k`, stride-1, zero-padded neighbourhood into
/// `(c * k * k) x plane` rows.
fn im2col<T: Real>(x: &Act<T>, k: usize, cols: &mut Vec<T>) {
    let (h, w, p) = (x.h, x.w, x.plane());
    let pad = (k / 2) as isize;
    cols.clear();
    cols.resize(x.c * k * k * p, T::zero());
    for ci in 0..x.c {
        let src_c = x.channel(ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for n in 0..x.n {
                    for r in 0..h {
                        let rs = r as isize + dy;
                        if rs < 0 || rs >= h as isize {
                            continue;
                        }
                        let src = &src_c[(n * h + rs as usize) * w..][..w];
                        let out = &mut dst[(n * h + r) * w..][..w];
                        shift_copy(src, out, dx);
                    }
                }
            }
        }
    }
}

/// `out[i] = src[i + dx]` where in range; other entries untouched.
#[inline]
fn shift_copy<T: Copy>(src: &[T], out: &mut [T], dx: isize) {
    let w = src.len();
    let s = dx.unsigned_abs();
    if s >= w {
        return;
    }
    if dx >= 0 {
        out[..w - s].copy_from_slice(&src[s..]);
    } else {
        out[s..].copy_from_slice(&src[..w - s]);
    }
}

/// Adjoint of [`im2col`].
fn col2im<T: Real>(cols: &[T], k: usize, dx_act: &mut Act<T>) {
    let (h, w, p) = (dx_act.h, dx_act.w, dx_act.plane());
    let pad = (k / 2) as isize;
    let (c, n_batch) = (dx_act.c, dx_act.n);
    for ci in 0..c {
        let dst_c = &mut dx_act.data[ci * p..(ci + 1) * p];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for n in 0..n_batch {
                    for r in 0..h {
                        let rs = r as isize + dy;
                        if rs < 0 || rs >= h as isize {
                            continue;
                        }
                        let from = &src[(n * h + r) * w..][..w];
                        let to = &mut dst_c[(n * h + rs as usize) * w..][..w];
                        let s = dx.unsigned_abs();
                        if s >= w {
                            continue;
                        }
                        if dx >= 0 {
                            for (t, f) in to[s..].iter_mut().zip(&from[..w - s]) {
                                *t += *f;
                            }
                        } else {
                            for (t, f) in to[..w - s].iter_mut().zip(&from[s..]) {
                                *t += *f;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 same-padded convolution; `weight` is `[cout][cin][k][k]`.
pub fn conv_forward<T: Real>(
    x: &Act<T>,
    weight: &[T],
    bias: &[T],
    cout: usize,
    k: usize,
    scratch: &mut Vec<T>,
) -> Act<T> {
    let p = x.plane();
    let kk = x.c * k * k;
    debug_assert_eq!(weight.len(), cout * kk);
    let mut y = Act::zeros(cout, x.n, x.h, x.w);
    for (co, chunk) in y.data.chunks_mut(p).enumerate() {
        chunk.fill(bias[co]);
    }
    let wmat = MatRef::rm(weight, cout, kk);
    if k == 1 {
        gemm(T::one(), wmat, MatRef::rm(&x.data, kk, p), T::one(), &mut y.data);
    } else {
        im2col(x, k, scratch);
        gemm(T::one(), wmat, MatRef::rm(scratch, kk, p), T::one(), &mut y.data);
    }
    y
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `need_dx` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Real>(
    x: &Act<T>,
    weight: &[T],
    dy: &Act<T>,
    k: usize,
    grad_w: &mut [T],
    grad_b: &mut [T],
    need_dx: bool,
    scratch: &mut Vec<T>,
) -> Option<Act<T>> {
    let p = x.plane();
    let cout = dy.c;
    let kk = x.c * k * k;
    for (co, g) in grad_b.iter_mut().enumerate() {
        *g += dy.channel(co).iter().copied().sum::<T>();
    }
    let dymat = MatRef::rm(&dy.data, cout, p);
    let cols: &[T] = if k == 1 {
        &x.data
    } else {
        im2col(x, k, scratch);
        scratch
    };
    gemm(T::one(), dymat, MatRef::rm_t(cols, p, kk), T::one(), grad_w);
    if !need_dx {
        return None;
    }
    let mut dx = Act::zeros(x.c, x.n, x.h, x.w);
    if k == 1 {
        gemm(T::one(), MatRef::rm_t(weight, kk, cout), dymat, T::zero(), &mut dx.data);
    } else {
        let mut dcols = vec![T::zero(); kk * p];
        gemm(T::one(), MatRef::rm_t(weight, kk, cout), dymat, T::zero(), &mut dcols);
        col2im(&dcols, k, &mut dx);
    }
    Some(dx)
}

pub const BN_EPS: f64 = 1e-5;

/// What a train-mode batch norm needs for its backward pass.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Per-channel batch statistics: mean and unbiased variance.
#[derive(Clone, Debug)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

/// Train-mode batch norm over `(batch, row, col)` per channel.
pub fn bn_forward_train<T: Real>(
    x: &Act<T>,
    gamma: &[T],
    beta: &[T],
) -> (Act<T>, BnCache<T>, BnStats) {
    let p = x.plane();
    let mut y = Act::zeros(x.c, x.n, x.h, x.w);
    let mut xhat = vec![T::zero(); x.data.len()];
    let mut inv_std = Vec::with_capacity(x.c);
    let mut stats = BnStats {
        mean: Vec::with_capacity(x.c),
        var_unbiased: Vec::with_capacity(x.c),
    };
    for c in 0..x.c {
        let xs = x.channel(c);
        let mean = xs.iter().map(|v| v.f64()).sum::<f64>() / p as f64;
        let ss = xs.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>();
        let var = ss / p as f64;
        let istd = 1.0 / (var + BN_EPS).sqrt();
        let (m, s) = (T::lit(mean), T::lit(istd));
        let (g, b) = (gamma[c], beta[c]);
        let xh = &mut xhat[c * p..(c + 1) * p];
        let out = &mut y.data[c * p..(c + 1) * p];
        for ((o, h), &v) in out.iter_mut().zip(xh.iter_mut()).zip(xs) {
            *h = (v - m) * s;
            *o = g * *h + b;
        }
        inv_std.push(s);
        stats.mean.push(mean);
        stats
            .var_unbiased
            .push(if p > 1 { ss / (p - 1) as f64 } else { var });
    }
    (y, BnCache { xhat, inv_std }, stats)
}

/// Inference-mode batch norm using running statistics.
pub fn bn_forward_eval<T: Real>(
    x: &Act<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
) -> Act<T> {
    let p = x.plane();
    let mut y = x.clone();
    for c in 0..x.c {
        let s = gamma[c] / (running_var[c] + T::lit(BN_EPS)).sqrt();
        let shift = beta[c] - running_mean[c] * s;
        for v in &mut y.data[c * p..(c + 1) * p] {
            *v = *v * s + shift;
        }
    }
    y
}

pub fn bn_backward<T: Real>(
    dy: &Act<T>,
    cache: &BnCache<T>,
    gamma: &[T],
    grad_gamma: &mut [T],
    grad_beta: &mut [T],
) -> Act<T> {
    let p = dy.plane();
    let mut dx = Act::zeros(dy.c, dy.n, dy.h, dy.w);
    let pn = T::lit(p as f64);
    for c in 0..dy.c {
        let d = dy.channel(c);
        let xh = &cache.xhat[c * p..(c + 1) * p];
        let sum_d: T = d.iter().copied().sum();
        let sum_dx: T = d.iter().zip(xh).map(|(&a, &b)| a * b).sum();
        grad_gamma[c] += sum_dx;
        grad_beta[c] += sum_d;
        let scale = gamma[c] * cache.inv_std[c] / pn;
        for ((o, &g), &h) in dx.data[c * p..(c + 1) * p].iter_mut().zip(d).zip(xh) {
            *o = scale * (pn * g - sum_d - h * sum_dx);
        }
    }
    dx
}

pub fn relu_inplace<T: Real>(x: &mut Act<T>) {
    for v in &mut x.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Gradient through a ReLU given its output.
pub fn relu_backward<T: Real>(dy: &mut Act<T>, out: &Act<T>) {
    for (d, &o) in dy.data.iter_mut().zip(&out.data) {
        if o <= T::zero() {
            *d = T::zero();
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutStyle {
    /// One keep/drop decision per feature map and sample.
    Channel,
    /// Independent decisions per activation.
    Pixel,
}

/// Inverted dropout. Sample `n` of the batch draws only from `rngs[n]`, so a
/// sample's masks do not depend on what else is in the batch. Returns the
/// per-element scale (0 or 1/(1-p)) for the backward pass.
pub fn dropout_forward<T: Real>(
    x: &mut Act<T>,
    rate: f64,
    style: DropoutStyle,
    rngs: &mut [Rng],
) -> Vec<T> {
    assert_eq!(rngs.len(), x.n, "one rng per batch element");
    let keep = T::lit(1.0 / (1.0 - rate));
    let hw = x.h * x.w;
    let p = x.plane();
    let mut scale = vec![T::zero(); x.data.len()];
    for (n, rng) in rngs.iter_mut().enumerate() {
        for c in 0..x.c {
            let off = c * p + n * hw;
            match style {
                DropoutStyle::Channel => {
                    let s = if rng.gen::<f64>() < rate { T::zero() } else { keep };
                    scale[off..off + hw].fill(s);
                }
                DropoutStyle::Pixel => {
                    for v in &mut scale[off..off + hw] {
                        *v = if rng.gen::<f64>() < rate { T::zero() } else { keep };
                    }
                }
            }
        }
    }
    for (v, s) in x.data.iter_mut().zip(&scale) {
        *v *= *s;
    }
    scale
}

pub fn dropout_backward<T: Real>(dy: &mut Act<T>, scale: &[T]) {
    for (d, s) in dy.data.iter_mut().zip(scale) {
        *d *= *s;
    }
}

/// 2x2 max pooling; returns the pooled activation and the argmax offsets.
pub fn maxpool_forward<T: Real>(x: &Act<T>) -> (Act<T>, Vec<u8>) {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut y = Act::zeros(x.c, x.n, h2, w2);
    let mut arg = vec![0u8; y.data.len()];
    let mut o = 0;
    for cn in 0..x.c * x.n {
        let src = &x.data[cn * x.h * x.w..][..x.h * x.w];
        for r in 0..h2 {
            for c in 0..w2 {
                let base = 2 * r * x.w + 2 * c;
                let cand = [src[base], src[base + 1], src[base + x.w], src[base + x.w + 1]];
                let mut best = 0;
                for i in 1..4 {
                    if cand[i] > cand[best] {
                        best = i;
                    }
                }
                y.data[o] = cand[best];
                arg[o] = best as u8;
                o += 1;
            }
        }
    }
    (y, arg)
}

pub fn maxpool_backward<T: Real>(dy: &Act<T>, arg: &[u8], h: usize, w: usize) -> Act<T> {
    let mut dx = Act::zeros(dy.c, dy.n, h, w);
    let (h2, w2) = (dy.h, dy.w);
    let mut o = 0;
    for cn in 0..dy.c * dy.n {
        let dst = &mut dx.data[cn * h * w..][..h * w];
        for r in 0..h2 {
            for c in 0..w2 {
                let a = arg[o] as usize;
                dst[(2 * r + a / 2) * w + 2 * c + a % 2] += dy.data[o];
                o += 1;
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_forward<T: Real>(x: &Act<T>) -> Act<T> {
    let (h2, w2) = (x.h * 2, x.w * 2);
    let mut y = Act::zeros(x.c, x.n, h2, w2);
    for cn in 0..x.c * x.n {
        let src = &x.data[cn * x.h * x.w..][..x.h * x.w];
        let dst = &mut y.data[cn * h2 * w2..][..h2 * w2];
        for r in 0..h2 {
            let s = &src[(r / 2) * x.w..][..x.w];
            for (c, d) in dst[r * w2..][..w2].iter_mut().enumerate() {
                *d = s[c / 2];
            }
        }
    }
    y
}

pub fn upsample_backward<T: Real>(dy: &Act<T>) -> Act<T> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Act::zeros(dy.c, dy.n, h, w);
    for cn in 0..dy.c * dy.n {
        let src = &dy.data[cn * dy.h * dy.w..][..dy.h * dy.w];
        let dst = &mut dx.data[cn * h * w..][..h * w];
        for r in 0..dy.h {
            for c in 0..dy.w {
                dst[(r / 2) * w + c / 2] += src[r * dy.w + c];
            }
        }
    }
    dx
}

/// Concatenates along channels (`a` first).
pub fn concat<T: Real>(a: &Act<T>, b: &Act<T>) -> Act<T> {
    debug_assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Act {
        c: a.c + b.c,
        n: a.n,
        h: a.h,
        w: a.w,
        data,
    }
}

pub fn split<T: Real>(x: Act<T>, first: usize) -> (Act<T>, Act<T>) {
    let p = x.plane();
    let mut data = x.data;
    let tail = data.split_off(first * p);
    (
        Act {
            c: first,
            n: x.n,
            h: x.h,
            w: x.w,
            data,
        },
        Act {
            c: x.c - first,
            n: x.n,
            h: x.h,
            w: x.w,
            data: tail,
        },
    )
}

/// Per-pixel softmax over channels.
pub fn softmax<T: Real>(logits: &Act<T>) -> Act<T> {
    let p = logits.plane();
    let k = logits.c;
    let mut out = logits.clone();
    for j in 0..p {
        let mut m = T::neg_infinity();
        for c in 0..k {
            m = m.max(logits.data[c * p + j]);
        }
        let mut sum = T::zero();
        for c in 0..k {
            let e = (logits.data[c * p + j] - m).exp();
            out.data[c * p + j] = e;
            sum += e;
        }
        for c in 0..k {
            out.data[c * p + j] = out.data[c * p + j] / sum;
        }
    }
    out
}

/// Mean cross-entropy of `labels` (one per pixel, batch-major) and the
/// gradient with respect to the logits.
pub fn cross_entropy<T: Real>(logits: &Act<T>, labels: &[u8]) -> (f64, Act<T>) {
    let p = logits.plane();
    assert_eq!(labels.len(), p);
    let probs = softmax(logits);
    let mut grad = probs.clone();
    let mut loss = 0.0;
    let inv = T::lit(1.0 / p as f64);
    for (j, &l) in labels.iter().enumerate() {
        let idx = l as usize * p + j;
        loss -= probs.data[idx].f64().max(f64::MIN_POSITIVE).ln();
        grad.data[idx] -= T::one();
    }
    for g in &mut grad.data {
        *g *= inv;
    }
    (loss / p as f64, grad)
}
