//! Forward kernels shared by the differentiable graph and the incremental
//! inference path. Every reduction runs in a fixed sequential order.

use super::counter;
use super::tensor::Float;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-major `out = op(a) * op(b) (+ out if accumulate)`.
///
/// `a` is `m x k` after the optional transpose, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn matmul<F: Float>(
    a: &[F],
    b: &[F],
    out: &mut [F],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { F::one() } else { F::zero() };
    if k == 0 {
        if !accumulate {
            out.iter_mut().for_each(|x| *x = F::zero());
        }
        return;
    }
    unsafe {
        F::gemm(
            m,
            k,
            n,
            F::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Counted forward product `a[m,k] @ b[k,n]`.
pub fn matmul_fwd<F: Float>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    matmul(a, b, &mut out, m, k, n, false, false, false);
    counter::add_matmul(m, k, n);
    out
}

pub fn dot<F: Float>(a: &[F], b: &[F]) -> F {
    let mut acc = F::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

/// Per-row layer norm. Returns (normalized-before-affine, reciprocal std).
pub fn layer_norm<F: Float>(
    x: &[F],
    cols: usize,
    gamma: &[F],
    beta: &[F],
    out: &mut [F],
) -> (Vec<F>, Vec<F>) {
    let rows = if cols == 0 { 0 } else { x.len() / cols };
    let eps = F::from_f64(LAYER_NORM_EPS);
    let inv_n = F::one() / F::from_f64(cols as f64);
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = vec![F::zero(); rows];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().copied().sum::<F>() * inv_n;
        let mut var = F::zero();
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var *= inv_n;
        let rs = F::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..cols {
            let h = (row[c] - mean) * rs;
            xhat[r * cols + c] = h;
            out[r * cols + c] = h * gamma[c] + beta[c];
        }
    }
    (xhat, rstd)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<F: Float>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let k = F::from_f64(GELU_K);
    let half = F::from_f64(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

pub fn gelu_grad<F: Float>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let k = F::from_f64(GELU_K);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (F::one() + three * k * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * du
}

pub fn sigmoid<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Rotates head-interleaved columns of each row by its position.
///
/// Each head of width `dh` is split into halves `(j, j + dh/2)` rotated by
/// `pos * base^(-2j/dh)`. `inverse` applies the transpose rotation, which
/// is the backward map.
pub fn rope<F: Float>(
    data: &mut [F],
    cols: usize,
    positions: &[usize],
    heads: usize,
    base: f64,
    inverse: bool,
) {
    let dh = cols / heads;
    let half = dh / 2;
    if half == 0 {
        return;
    }
    let max_pos = positions.iter().copied().max().unwrap_or(0);
    let mut table = vec![(F::zero(), F::zero()); (max_pos + 1) * half];
    let mut seen = vec![false; max_pos + 1];
    for &p in positions {
        if seen[p] {
            continue;
        }
        seen[p] = true;
        for j in 0..half {
            let freq = base.powf(-2.0 * j as f64 / dh as f64);
            let angle = p as f64 * freq;
            table[p * half + j] = (F::from_f64(angle.cos()), F::from_f64(angle.sin()));
        }
    }
    for (r, &p) in positions.iter().enumerate() {
        let row = &mut data[r * cols..(r + 1) * cols];
        for h in 0..heads {
            let off = h * dh;
            for j in 0..half {
                let (c, mut s) = table[p * half + j];
                if inverse {
                    s = -s;
                }
                let a = row[off + j];
                let b = row[off + j + half];
                row[off + j] = a * c - b * s;
                row[off + j + half] = a * s + b * c;
            }
        }
    }
}

/// In-place softmax over the allowed entries of a row; disallowed entries
/// become exactly zero.
pub fn masked_softmax_row<F: Float>(scores: &mut [F], allow: &[bool]) {
    let mut max = F::neg_infinity();
    for (s, &a) in scores.iter().zip(allow) {
        if a && *s > max {
            max = *s;
        }
    }
    let mut sum = F::zero();
    for (s, &a) in scores.iter_mut().zip(allow) {
        if a {
            *s = (*s - max).exp();
            sum += *s;
        } else {
            *s = F::zero();
        }
    }
    let inv = F::one() / sum;
    for (s, &a) in scores.iter_mut().zip(allow) {
        if a {
            *s *= inv;
        }
    }
}

pub fn softmax_row<F: Float>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = F::one() / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

pub fn log_sum_exp<F: Float>(row: &[F]) -> F {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for &x in row {
        sum += (x - max).exp();
    }
    max + sum.ln()
}

/// Shannon entropy (nats) of `softmax(logits)`.
pub fn entropy_from_logits<F: Float>(logits: &[F]) -> F {
    let lse = log_sum_exp(logits);
    let mut h = F::zero();
    for &l in logits {
        let logp = l - lse;
        h -= logp.exp() * logp;
    }
    h.max(F::zero())
}

/// Multi-head attention of one query row over `n_keys` cached rows.
///
/// Keys are assumed already rotated. Counted as `4 * n_keys * d` flops.
pub fn attend_one<F: Float>(
    q: &[F],
    keys: &[F],
    values: &[F],
    n_keys: usize,
    heads: usize,
) -> Vec<F> {
    let d = q.len();
    let dh = d / heads;
    let scale = F::one() / F::from_f64(dh as f64).sqrt();
    let mut out = vec![F::zero(); d];
    let mut scores = vec![F::zero(); n_keys];
    for h in 0..heads {
        let off = h * dh;
        let qh = &q[off..off + dh];
        for (j, s) in scores.iter_mut().enumerate() {
            *s = dot(qh, &keys[j * d + off..j * d + off + dh]) * scale;
        }
        softmax_row(&mut scores);
        let oh = &mut out[off..off + dh];
        for (j, &p) in scores.iter().enumerate() {
            let vj = &values[j * d + off..j * d + off + dh];
            for (o, v) in oh.iter_mut().zip(vj) {
                *o += p * *v;
            }
        }
    }
    counter::add_matmul(2, n_keys, d);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        matmul(&a, &b, &mut out, 2, 2, 2, false, false, false);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
        matmul(&a, &b, &mut out, 2, 2, 2, true, false, false);
        assert_eq!(out, [26.0, 30.0, 38.0, 44.0]);
        matmul(&a, &b, &mut out, 2, 2, 2, false, true, false);
        assert_eq!(out, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn rope_inverse_restores() {
        let mut x: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let orig = x.clone();
        rope(&mut x, 8, &[3, 11], 2, 10000.0, false);
        assert!(x != orig);
        rope(&mut x, 8, &[3, 11], 2, 10000.0, true);
        for (a, b) in x.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(3.0f64) - 2.99636).abs() < 1e-4);
    }

    #[test]
    fn entropy_uniform() {
        let h = entropy_from_logits(&[0.0f64; 320]);
        assert!((h - 320f64.ln()).abs() < 1e-12);
    }
}
