//! Raw numeric kernels over flat row-major buffers.
//!
//! The differentiable layer in [`crate::tape`] wraps these; samplers and
//! benchmarks hit them directly. Every kernel reports its multiply count to a
//! thread-local tally so cost comparisons (cached vs uncached forward) can be
//! asserted rather than eyeballed.

use std::cell::Cell;

use crate::error::{Error, Result};

thread_local! {
    static MUL_COUNT: Cell<u64> = const { Cell::new(0) };
}

pub fn reset_mul_count() {
    MUL_COUNT.with(|c| c.set(0));
}

pub fn mul_count() -> u64 {
    MUL_COUNT.with(|c| c.get())
}

#[inline]
fn count_muls(n: u64) {
    MUL_COUNT.with(|c| c.set(c.get() + n));
}

pub fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { op, index }),
        None => Ok(()),
    }
}

/// `a[m x k] * b[k x n]`, row-major.
pub fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    count_muls((m * k * n) as u64);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let aik = a[i * k + l];
            let b_row = &b[l * n..(l + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// `a[m x k] * b[n x k]^T`, row-major; i.e. pairwise row dot products.
pub fn matmul_nt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    count_muls((m * k * n) as u64);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (av, bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// `a[k x m]^T * b[k x n]`, row-major.
pub fn matmul_tn(a: &[f64], k: usize, m: usize, b: &[f64], n: usize) -> Vec<f64> {
    count_muls((m * k * n) as u64);
    let mut out = vec![0.0; m * n];
    for l in 0..k {
        let a_row = &a[l * m..(l + 1) * m];
        let b_row = &b[l * n..(l + 1) * n];
        for i in 0..m {
            let ail = a_row[i];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += ail * bv;
            }
        }
    }
    out
}

pub fn ewise_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    count_muls(a.len() as u64);
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

pub fn scale(a: &[f64], c: f64) -> Vec<f64> {
    count_muls(a.len() as u64);
    a.iter().map(|x| x * c).collect()
}

/// Row-wise softmax with an optional additive mask of the same layout.
/// Mask entries must be `0.0` or `-inf`. Fails on rows that are entirely
/// masked, naming the row.
pub fn softmax_rows(
    a: &[f64],
    rows: usize,
    cols: usize,
    mask: Option<&[f64]>,
) -> Result<Vec<f64>> {
    if let Some(m) = mask {
        assert_eq!(m.len(), rows * cols, "mask layout mismatch");
    }
    count_muls((rows * cols) as u64);
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &a[r * cols..(r + 1) * cols];
        let mask_row = mask.map(|m| &m[r * cols..(r + 1) * cols]);
        let masked = |j: usize| match mask_row {
            Some(m) => row[j] + m[j],
            None => row[j],
        };
        let mut max = f64::NEG_INFINITY;
        for j in 0..cols {
            max = max.max(masked(j));
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::FullyMaskedRow { row: r });
        }
        let out_row = &mut out[r * cols..(r + 1) * cols];
        let mut denom = 0.0;
        for j in 0..cols {
            let e = (masked(j) - max).exp();
            out_row[j] = e;
            denom += e;
        }
        for v in out_row.iter_mut() {
            *v /= denom;
        }
    }
    Ok(out)
}

/// Normalize each length-`d` row to mean 0, variance 1 (biased variance,
/// `eps` inside the square root). Returns `(out, inv_std per row)`.
pub fn layer_norm(a: &[f64], d: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let rows = a.len() / d;
    count_muls((rows * d * 2) as u64);
    let mut out = vec![0.0; a.len()];
    let mut inv_stds = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &a[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_stds.push(inv);
        for (o, x) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
            *o = (x - mean) * inv;
        }
    }
    (out, inv_stds)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044715;

/// Smooth GELU (tanh form).
pub fn gelu(a: &[f64]) -> Vec<f64> {
    count_muls(6 * a.len() as u64);
    a.iter()
        .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()))
        .collect()
}

/// d gelu / dx, evaluated at the forward inputs.
pub fn gelu_grad(a: &[f64]) -> Vec<f64> {
    count_muls(10 * a.len() as u64);
    a.iter()
        .map(|&x| {
            let u = GELU_C * (x + GELU_K * x * x * x);
            let t = u.tanh();
            let sech2 = 1.0 - t * t;
            0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
        })
        .collect()
}

/// Rotate consecutive pairs of each row by `position * theta_j`.
/// `forward = false` applies the inverse rotation (used for adjoints).
pub fn rope(
    a: &[f64],
    d: usize,
    positions: &[usize],
    thetas: &[f64],
    forward: bool,
) -> Vec<f64> {
    let rows = a.len() / d;
    debug_assert_eq!(rows, positions.len());
    debug_assert_eq!(thetas.len(), d / 2);
    count_muls((rows * d * 2) as u64);
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        let p = positions[r] as f64;
        let row = &a[r * d..(r + 1) * d];
        let out_row = &mut out[r * d..(r + 1) * d];
        for j in 0..d / 2 {
            let angle = p * thetas[j];
            let (sin, cos) = if forward {
                angle.sin_cos()
            } else {
                ((-angle).sin(), (-angle).cos())
            };
            let x0 = row[2 * j];
            let x1 = row[2 * j + 1];
            out_row[2 * j] = x0 * cos - x1 * sin;
            out_row[2 * j + 1] = x0 * sin + x1 * cos;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        // a: 2x3, b: 3x2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let ab = matmul(&a, 2, 3, &b, 2);
        // b^T is 2x3 row-major
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let ab_nt = matmul_nt(&a, 2, 3, &bt, 2);
        assert_eq!(ab, ab_nt);
        // a^T is 3x2; matmul_tn(a^T stored as a ...) checks (a^T)^T b = a b
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let ab_tn = matmul_tn(&at, 3, 2, &b, 2);
        assert_eq!(ab, ab_tn);
    }

    #[test]
    fn mul_counter_tracks_matmul() {
        reset_mul_count();
        let a = vec![1.0; 6];
        let b = vec![1.0; 6];
        let _ = matmul(&a, 2, 3, &b, 2);
        assert_eq!(mul_count(), 12);
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        let xs = [-3.0, -0.7, 0.0, 0.4, 2.1];
        let g = gelu_grad(&xs);
        let h = 1e-6;
        for (i, &x) in xs.iter().enumerate() {
            let fd = (gelu(&[x + h])[0] - gelu(&[x - h])[0]) / (2.0 * h);
            assert!((g[i] - fd).abs() < 1e-8, "x={x}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn rope_inverse_round_trips() {
        let row = [0.3, -1.2, 2.0, 0.5];
        let thetas = [1.0, 0.1];
        let fwd = rope(&row, 4, &[5], &thetas, true);
        let back = rope(&fwd, 4, &[5], &thetas, false);
        for (a, b) in row.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
