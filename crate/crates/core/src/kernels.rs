//! Slice-level numeric kernels shared by the training graph and the
//! streaming engine.
//!
//! Every kernel computes each output row from the matching input row only and
//! accumulates in a fixed order, so a row computed alone is bit-identical to
//! the same row computed inside a larger batch.

use crate::math;

/// `out (m x n) = a (m x k) * b (k x n)`, overwriting `out`.
///
/// For every output element the sum runs over `k` in ascending order. The
/// `k` range is walked in cache-sized panels of `b`; panels are visited in
/// order, so blocking does not change any result bit.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    if n == 0 {
        return;
    }
    // about 32 KiB of `b` per panel, a multiple of the 4-row unroll
    let panel = ((4096 / n).max(4) / 4) * 4;
    let mut p0 = 0;
    while p0 < k {
        let p1 = (p0 + panel).min(k);
        let bp = &b[p0 * n..p1 * n];
        let mut i = 0;
        while i + 2 <= m {
            let (c0, c1) = out[i * n..(i + 2) * n].split_at_mut(n);
            panel_rows2(
                &a[i * k + p0..i * k + p1],
                &a[(i + 1) * k + p0..(i + 1) * k + p1],
                bp,
                n,
                c0,
                c1,
            );
            i += 2;
        }
        if i < m {
            panel_row(
                &a[i * k + p0..i * k + p1],
                bp,
                n,
                &mut out[i * n..(i + 1) * n],
            );
        }
        p0 = p1;
    }
}

#[inline(always)]
fn panel_row(a_row: &[f64], b: &[f64], n: usize, c: &mut [f64]) {
    let k = a_row.len();
    let mut p = 0;
    while p + 4 <= k {
        let (a0, a1, a2, a3) = (a_row[p], a_row[p + 1], a_row[p + 2], a_row[p + 3]);
        let b0 = &b[p * n..(p + 1) * n];
        let b1 = &b[(p + 1) * n..(p + 2) * n];
        let b2 = &b[(p + 2) * n..(p + 3) * n];
        let b3 = &b[(p + 3) * n..(p + 4) * n];
        for j in 0..n {
            // left-to-right association keeps the sequential order
            c[j] = c[j] + a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
        }
        p += 4;
    }
    while p < k {
        let av = a_row[p];
        let bp = &b[p * n..(p + 1) * n];
        for j in 0..n {
            c[j] += av * bp[j];
        }
        p += 1;
    }
}

/// Two output rows sharing each load of `b`.
#[inline(always)]
fn panel_rows2(x: &[f64], y: &[f64], b: &[f64], n: usize, c: &mut [f64], d: &mut [f64]) {
    let k = x.len();
    let c = &mut c[..n];
    let d = &mut d[..n];
    let mut p = 0;
    while p + 4 <= k {
        let (x0, x1, x2, x3) = (x[p], x[p + 1], x[p + 2], x[p + 3]);
        let (y0, y1, y2, y3) = (y[p], y[p + 1], y[p + 2], y[p + 3]);
        let b0 = &b[p * n..(p + 1) * n];
        let b1 = &b[(p + 1) * n..(p + 2) * n];
        let b2 = &b[(p + 2) * n..(p + 3) * n];
        let b3 = &b[(p + 3) * n..(p + 4) * n];
        for j in 0..n {
            let (v0, v1, v2, v3) = (b0[j], b1[j], b2[j], b3[j]);
            c[j] = c[j] + x0 * v0 + x1 * v1 + x2 * v2 + x3 * v3;
            d[j] = d[j] + y0 * v0 + y1 * v1 + y2 * v2 + y3 * v3;
        }
        p += 4;
    }
    while p < k {
        let bp = &b[p * n..(p + 1) * n];
        for j in 0..n {
            c[j] += x[p] * bp[j];
            d[j] += y[p] * bp[j];
        }
        p += 1;
    }
}

/// Row-major transpose of an `m x n` matrix.
pub fn transpose(a: &[f64], m: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
}

/// Adds `bias` to every row of `x` (row width `bias.len()`).
pub fn add_bias(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Layer normalization of one row; returns `(mean, 1/sqrt(var + eps))`.
pub fn layer_norm_row(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    out: &mut [f64],
) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / math::sqrt(var + eps);
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * rstd * gamma[i] + beta[i];
    }
    (mean, rstd)
}

pub fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = math::exp(v - max);
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn log_softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = x.iter().map(|&v| math::exp(v - max)).sum();
    let lse = max + math::ln(sum);
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// One head of scaled dot-product attention for a single query row.
///
/// `keys` and `values` hold `visible` rows of width `stride`; the head reads
/// columns `offset..offset + q.len()`. Probabilities are written to `probs`
/// and the attended vector to `out`.
#[allow(clippy::too_many_arguments)]
pub fn attention_row(
    q: &[f64],
    keys: &[f64],
    values: &[f64],
    stride: usize,
    offset: usize,
    visible: usize,
    scale: f64,
    probs: &mut [f64],
    out: &mut [f64],
) {
    let hd = q.len();
    for j in 0..visible {
        let k = &keys[j * stride + offset..j * stride + offset + hd];
        let mut s = 0.0;
        for c in 0..hd {
            s += q[c] * k[c];
        }
        probs[j] = s * scale;
    }
    let max = probs[..visible]
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for p in probs[..visible].iter_mut() {
        *p = math::exp(*p - max);
        sum += *p;
    }
    for p in probs[..visible].iter_mut() {
        *p /= sum;
    }
    out.fill(0.0);
    for j in 0..visible {
        let v = &values[j * stride + offset..j * stride + offset + hd];
        let p = probs[j];
        for c in 0..hd {
            out[c] += p * v[c];
        }
    }
}
