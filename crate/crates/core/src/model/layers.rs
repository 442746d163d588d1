//! Forward and backward kernels shared by the denoiser.

use super::params::Linear;
use crate::tensor::{gemm, Mat, MatMut, Real};

pub const LN_EPS: f64 = 1e-6;

/// `x · W + b` for `rows` rows of `x`.
pub fn linear<T: Real>(x: &[T], rows: usize, lin: &Linear<T>) -> Vec<T> {
    let (fi, fo) = (lin.fan_in(), lin.fan_out());
    let mut y = Vec::with_capacity(rows * fo);
    for _ in 0..rows {
        y.extend_from_slice(&lin.bias.data);
    }
    gemm(T::one(), Mat::new(x, rows, fi), Mat::new(&lin.weight.data, fi, fo), T::one(), MatMut::new(&mut y, rows, fo));
    y
}

/// Accumulates parameter gradients of [`linear`] and, when `dx` is given, adds
/// `dy · Wᵀ` into it.
pub fn linear_backward<T: Real>(x: &[T], rows: usize, lin: &Linear<T>, dy: &[T], grad: &mut Linear<T>, dx: Option<&mut [T]>) {
    let (fi, fo) = (lin.fan_in(), lin.fan_out());
    gemm(
        T::one(),
        Mat::new(x, rows, fi).t(),
        Mat::new(dy, rows, fo),
        T::one(),
        MatMut::new(&mut grad.weight.data, fi, fo),
    );
    for r in 0..rows {
        for (g, &v) in grad.bias.data.iter_mut().zip(&dy[r * fo..(r + 1) * fo]) {
            *g += v;
        }
    }
    if let Some(dx) = dx {
        gemm(T::one(), Mat::new(dy, rows, fo), Mat::new(&lin.weight.data, fi, fo).t(), T::one(), MatMut::new(dx, rows, fi));
    }
}

/// Affine-free LayerNorm. Returns the normalized rows and per-row `1/σ`.
pub fn layer_norm<T: Real>(x: &[T], d: usize) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut out = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(rows);
    let inv_d = T::lit(1.0 / d as f64);
    for row in x.chunks_exact(d) {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let r = T::one() / (var + T::lit(LN_EPS)).sqrt();
        out.extend(row.iter().map(|&v| (v - mean) * r));
        rstd.push(r);
    }
    (out, rstd)
}

/// Adds the input gradient of [`layer_norm`] into `dx`.
pub fn layer_norm_backward<T: Real>(xhat: &[T], rstd: &[T], dxhat: &[T], d: usize, dx: &mut [T]) {
    let inv_d = T::lit(1.0 / d as f64);
    for (r, &rs) in rstd.iter().enumerate() {
        let span = r * d..(r + 1) * d;
        let xh = &xhat[span.clone()];
        let g = &dxhat[span.clone()];
        let mean_g = g.iter().copied().sum::<T>() * inv_d;
        let mean_gx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
        for ((o, &gi), &xi) in dx[span].iter_mut().zip(g).zip(xh) {
            *o += rs * (gi - mean_g - xi * mean_gx);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)

/// tanh through a single `exp` of a non-positive argument; libm's tanh is the
/// training hot spot.
#[inline]
fn tanh<T: Real>(u: T) -> T {
    let e = (T::lit(-2.0) * u.abs()).exp();
    let t = (T::one() - e) / (T::one() + e);
    if u < T::zero() {
        -t
    } else {
        t
    }
}

pub fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    half * x * (T::one() + tanh(c * (x + k * x * x * x)))
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let t = tanh(c * (x + k * x * x * x));
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x)
}

pub fn silu<T: Real>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

pub fn silu_grad<T: Real>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

/// Sinusoidal timestep features `[cos(t·f_i) …, sin(t·f_i) …]`.
pub fn timestep_features<T: Real>(t: usize, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let freq = |i: usize| (-(10_000f64.ln()) * i as f64 / half as f64).exp();
    let mut out: Vec<T> = (0..half).map(|i| T::lit((t as f64 * freq(i)).cos())).collect();
    out.extend((0..half).map(|i| T::lit((t as f64 * freq(i)).sin())));
    out
}

/// Pre-phase modulation `γ ⊙ LayerNorm(x) + β`, row-wise.
pub fn modulate_pre<T: Real>(x: &[T], gamma: &[T], beta: &[T]) -> Vec<T> {
    let d = gamma.len();
    let (xhat, _) = layer_norm(x, d);
    xhat.chunks_exact(d)
        .flat_map(|row| row.iter().zip(gamma).zip(beta).map(|((&v, &g), &b)| g * v + b))
        .collect()
}

/// Post-phase modulation: the gated residual `x + α ⊙ sublayer`.
pub fn modulate_post<T: Real>(x: &[T], sublayer: &[T], alpha: &[T]) -> Vec<T> {
    let d = alpha.len();
    x.iter()
        .zip(sublayer)
        .enumerate()
        .map(|(i, (&xi, &si))| xi + alpha[i % d] * si)
        .collect()
}

/// One operand of an attention call: rows `b·seq + i` of a row-major buffer with
/// row stride `rs`, starting at column `col`.
#[derive(Clone, Copy)]
pub struct Operand<'a, T> {
    pub data: &'a [T],
    pub col: usize,
    pub rs: usize,
    pub seq: usize,
}

impl<'a, T: Real> Operand<'a, T> {
    fn head(&self, b: usize, h: usize, dh: usize) -> Mat<'a, T> {
        Mat::strided(self.data, b * self.seq * self.rs + self.col + h * dh, self.seq, dh, self.rs, 1)
    }
}

pub struct AttentionShape {
    pub batch: usize,
    pub heads: usize,
    pub head_dim: usize,
}

/// Multi-head scaled dot-product attention.
///
/// `mask`, when given, is `[q_len × kv_len]`. Output rows are written to `out`
/// (`[batch·q_len × heads·head_dim]`), and the attention probabilities to `probs`
/// (`[batch × heads × q_len × kv_len]`) for the backward pass.
pub fn attention<T: Real>(
    shape: &AttentionShape,
    q: Operand<'_, T>,
    k: Operand<'_, T>,
    v: Operand<'_, T>,
    mask: Option<&[bool]>,
    out: &mut [T],
    probs: &mut [T],
) {
    let (nq, nk, dh) = (q.seq, k.seq, shape.head_dim);
    let width = shape.heads * dh;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    for b in 0..shape.batch {
        for h in 0..shape.heads {
            let p_off = (b * shape.heads + h) * nq * nk;
            let p = &mut probs[p_off..p_off + nq * nk];
            gemm(scale, q.head(b, h, dh), k.head(b, h, dh).t(), T::zero(), MatMut::new(p, nq, nk));
            for (i, row) in p.chunks_exact_mut(nk).enumerate() {
                if let Some(m) = mask {
                    let allowed = &m[i * nk..(i + 1) * nk];
                    row.iter_mut().zip(allowed).filter(|(_, &a)| !a).for_each(|(s, _)| *s = T::neg_infinity());
                }
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for s in row.iter_mut() {
                    // exp(−∞) = 0 for masked entries
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let inv = T::one() / sum;
                row.iter_mut().for_each(|s| *s *= inv);
            }
            gemm(
                T::one(),
                Mat::new(p, nq, nk),
                v.head(b, h, dh),
                T::zero(),
                MatMut::strided(out, b * nq * width + h * dh, nq, dh, width, 1),
            );
        }
    }
}

/// Gradients of [`attention`] with respect to q, k and v, written (not added) into
/// contiguous `[batch·len × heads·head_dim]` buffers.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Real>(
    shape: &AttentionShape,
    q: Operand<'_, T>,
    k: Operand<'_, T>,
    v: Operand<'_, T>,
    probs: &[T],
    d_out: &[T],
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let (nq, nk, dh) = (q.seq, k.seq, shape.head_dim);
    let width = shape.heads * dh;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut dp = vec![T::zero(); nq * nk];
    for b in 0..shape.batch {
        for h in 0..shape.heads {
            let p_off = (b * shape.heads + h) * nq * nk;
            let p = &probs[p_off..p_off + nq * nk];
            let d_o = Mat::strided(d_out, b * nq * width + h * dh, nq, dh, width, 1);
            gemm(T::one(), d_o, v.head(b, h, dh).t(), T::zero(), MatMut::new(&mut dp, nq, nk));
            gemm(
                T::one(),
                Mat::new(p, nq, nk).t(),
                d_o,
                T::zero(),
                MatMut::strided(dv, b * nk * width + h * dh, nk, dh, width, 1),
            );
            for i in 0..nq {
                let pr = &p[i * nk..(i + 1) * nk];
                let dr = &mut dp[i * nk..(i + 1) * nk];
                let dot = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum::<T>();
                for (d, &pv) in dr.iter_mut().zip(pr) {
                    *d = pv * (*d - dot);
                }
            }
            gemm(
                scale,
                Mat::new(&dp, nq, nk),
                k.head(b, h, dh),
                T::zero(),
                MatMut::strided(dq, b * nq * width + h * dh, nq, dh, width, 1),
            );
            gemm(
                scale,
                Mat::new(&dp, nq, nk).t(),
                q.head(b, h, dh),
                T::zero(),
                MatMut::strided(dk, b * nk * width + h * dh, nk, dh, width, 1),
            );
        }
    }
}
