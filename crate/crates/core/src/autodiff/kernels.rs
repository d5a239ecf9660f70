//! Row kernels shared by the tape and the inference engine.
//!
//! Each reduction accumulates in a fixed ascending order starting from zero.
//! Two callers that feed identical rows get identical bits back.

use super::real::Real;
use crate::special;

pub const LAYER_NORM_EPS: f64 = 1e-10;

/// `out = x · w` for one row `x` of length `k` and `w` of shape `[k, cols]`.
#[inline]
pub fn vecmat<T: Real>(x: &[T], w: &[T], cols: usize, out: &mut [T]) {
    debug_assert_eq!(w.len(), x.len() * cols);
    debug_assert_eq!(out.len(), cols);
    out.fill(T::ZERO);
    for (k, &a) in x.iter().enumerate() {
        let wr = &w[k * cols..(k + 1) * cols];
        for (o, &b) in out.iter_mut().zip(wr) {
            *o += a * b;
        }
    }
}

/// Row-wise `out[i] = x[i] · w` for `x` of shape `[rows, k]`.
pub fn matmul<T: Real>(x: &[T], w: &[T], k: usize, cols: usize, out: &mut [T]) {
    let rows = x.len().checked_div(k).unwrap_or(out.len() / cols.max(1));
    for i in 0..rows {
        vecmat(
            &x[i * k..(i + 1) * k],
            w,
            cols,
            &mut out[i * cols..(i + 1) * cols],
        );
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::ZERO;
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Normalizes one row to zero mean and unit variance; returns `(mean, 1/std)`.
pub fn layer_norm_row<T: Real>(x: &[T], out: &mut [T]) -> (T, T) {
    let n = T::from_f64(x.len() as f64);
    let mut sum = T::ZERO;
    for &v in x {
        sum += v;
    }
    let mean = sum / n;
    let mut var = T::ZERO;
    for &v in x {
        let c = v - mean;
        var += c * c;
    }
    let var = var / n;
    let inv = T::ONE / (var + T::from_f64(LAYER_NORM_EPS)).sqrt();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - mean) * inv;
    }
    (mean, inv)
}

/// Numerically stable softmax of one row.
pub fn softmax_row<T: Real>(x: &[T], out: &mut [T]) {
    let mut m = T::NEG_INFINITY;
    for &v in x {
        m = m.max(v);
    }
    let mut sum = T::ZERO;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let v = x.to_f64();
    T::from_f64(0.5 * v * (1.0 + special::erf(v * std::f64::consts::FRAC_1_SQRT_2)))
}

/// d gelu / dx = Φ(x) + x φ(x)
#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    special::normal_cdf(x) + x * special::normal_pdf(x)
}

#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    let v = x.to_f64();
    T::from_f64(if v > 30.0 { v } else { v.exp().ln_1p() })
}

/// Index one past the last key visible to query row `i`: prompt rows see the
/// whole prompt, later rows see the prompt and everything up to themselves.
#[inline]
pub fn visible_keys(i: usize, prefix: usize) -> usize {
    prefix.max(i + 1)
}

/// Attention for one head of one query row.
///
/// `keys`/`values` hold `n` rows of width `stride`; this head reads columns
/// `offset..offset + q.len()`. `probs` receives the attention weights.
#[allow(clippy::too_many_arguments)]
pub fn attend_row<T: Real>(
    q: &[T],
    keys: &[T],
    values: &[T],
    stride: usize,
    offset: usize,
    n: usize,
    scale: T,
    probs: &mut [T],
    out: &mut [T],
) {
    let dh = q.len();
    let mut m = T::NEG_INFINITY;
    for j in 0..n {
        let kj = &keys[j * stride + offset..j * stride + offset + dh];
        let s = dot(q, kj) * scale;
        probs[j] = s;
        m = m.max(s);
    }
    let mut sum = T::ZERO;
    for p in probs[..n].iter_mut() {
        *p = (*p - m).exp();
        sum += *p;
    }
    for p in probs[..n].iter_mut() {
        *p = *p / sum;
    }
    out.fill(T::ZERO);
    for (j, &p) in probs[..n].iter().enumerate() {
        let vj = &values[j * stride + offset..j * stride + offset + dh];
        for (o, &v) in out.iter_mut().zip(vj) {
            *o += p * v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vecmat_identity() {
        let w = [1.0, 0.0, 0.0, 1.0];
        let mut out = [0.0; 2];
        vecmat(&[3.0, 4.0], &w, 2, &mut out);
        assert_eq!(out, [3.0, 4.0]);
    }

    #[test]
    fn softmax_uniform() {
        let mut out = [0.0; 3];
        softmax_row(&[0.0f64, 0.0, 0.0], &mut out);
        for p in out {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_moments() {
        let x = [1.0f64, -2.0, 5.5, 0.25, 9.0];
        let mut out = [0.0; 5];
        layer_norm_row(&x, &mut out);
        let mean: f64 = out.iter().sum::<f64>() / 5.0;
        let var: f64 = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-8);
    }

    #[test]
    fn f32_and_f64_agree_roughly() {
        let x = [0.5f64, -1.5, 2.0];
        let x32: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        let mut a = [0.0f64; 3];
        let mut b = [0.0f32; 3];
        softmax_row(&x, &mut a);
        softmax_row(&x32, &mut b);
        for (p, q) in a.iter().zip(b) {
            assert!((p - q as f64).abs() < 1e-6);
        }
    }
}
