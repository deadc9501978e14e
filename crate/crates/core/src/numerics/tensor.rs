//! Dense row-major f64 matrices with cheaply clonable (shared) storage.
//!
//! Everything in the crate is at most rank 2; vectors are `1 x n` matrices.
//! Storage sits behind an `Arc` so binding parameters onto many tapes does
//! not copy them. Mutation goes through [`Tensor::data_mut`], which is
//! copy-on-write.

use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, rejecting shape/length mismatch and non-finite values.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Tensor::new",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "Tensor::new" });
        }
        Ok(Self { rows, cols, data: Arc::new(data) })
    }

    /// Like [`Tensor::new`] but without the finiteness scan; for internal
    /// construction from values that are already checked or about to be.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data: Arc::new(data) }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self::from_raw(rows, cols, vec![value; rows * cols])
    }

    pub fn row_vec(data: Vec<f64>) -> Self {
        let cols = data.len();
        Self::from_raw(1, cols, data)
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_raw(1, 1, vec![value])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access; clones the buffer first if another handle shares it.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Shared handle to the underlying storage (no copy).
    pub(crate) fn storage(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    /// Bitwise equality, used by determinism and mask-soundness checks.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

// ── Kernels ──────────────────────────────────────────────────────────
//
// Plain-slice math shared by the tape ops and the eval paths. Inner loops
// run over contiguous rows so the compiler can vectorize them.

/// c += a[m,k] @ b[k,n]
pub fn mm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ip * bv;
            }
        }
    }
}

/// a[m,k] @ b[k,n]
pub fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    mm_acc(a, b, &mut c, m, k, n);
    c
}

/// a[m,k] @ b[n,k]^T  -> [m,n]
pub fn mm_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            *cv = dot(a_row, b_row);
        }
    }
    c
}

/// a[r,m]^T @ b[r,n]  -> [m,n]
pub fn mm_at(a: &[f64], b: &[f64], r: usize, m: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), r * m);
    debug_assert_eq!(b.len(), r * n);
    let mut c = vec![0.0; m * n];
    for i in 0..r {
        let a_row = &a[i * m..(i + 1) * m];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ip * bv;
            }
        }
    }
    c
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub const GELU_COEFF: f64 = 0.044715;

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_COEFF * x * x * x)).tanh())
}

pub fn gelu_deriv(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_COEFF * x * x * x);
    let t = u.tanh();
    let du = c * (1.0 + 3.0 * GELU_COEFF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Softmax of one row, in place, with the usual max-shift for stability.
pub fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// log(sum(exp(row))) with max-shift.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Per-row layer normalization: y = gamma * (x - mean) / sqrt(var + eps) + beta.
pub fn layer_norm_rows(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    rows: usize,
    cols: usize,
    eps: f64,
) -> Vec<f64> {
    debug_assert_eq!(gamma.len(), cols);
    debug_assert_eq!(beta.len(), cols);
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let xs = &x[r * cols..(r + 1) * cols];
        let ys = &mut out[r * cols..(r + 1) * cols];
        let mean = xs.iter().sum::<f64>() / cols as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..cols {
            ys[j] = gamma[j] * (xs[j] - mean) * inv + beta[j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_shape_and_nan() {
        assert!(Tensor::new(2, 2, vec![1.0; 3]).is_err());
        assert!(Tensor::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(1, 2, vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn mm_identity() {
        let i2 = vec![1.0, 0.0, 0.0, 1.0];
        let a = vec![2.0, 3.0, 4.0, 5.0];
        assert_eq!(mm(&i2, &a, 2, 2, 2), a);
    }

    #[test]
    fn mm_variants_agree() {
        // a: 2x3, b: 3x2
        let a = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = vec![0.5, -1.0, 2.0, 0.0, 1.5, 1.0];
        let c = mm(&a, &b, 2, 3, 2);
        // b^T as 2x3 then mm_bt against it reproduces c
        let bt = vec![0.5, 2.0, 1.5, -1.0, 0.0, 1.0];
        assert_eq!(mm_bt(&a, &bt, 2, 3, 2), c);
        // (a^T)^T b via mm_at
        let at = vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]; // 3x2
        assert_eq!(mm_at(&at, &b, 3, 2, 2), c);
    }

    #[test]
    fn softmax_uniform() {
        let mut row = vec![0.0, 0.0, 0.0];
        softmax_row(&mut row);
        assert_eq!(row, vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let out = layer_norm_rows(&[1.0, 2.0, 3.0], &[1.0; 3], &[0.0; 3], 1, 3, 1e-5);
        assert!((out[0] + 1.2247).abs() < 1e-3);
        assert!(out[1].abs() < 1e-12);
        assert!((out[2] - 1.2247).abs() < 1e-3);
        let mean: f64 = out.iter().sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn gelu_deriv_matches_finite_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.3, 1.9] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_deriv(x) - fd).abs() < 1e-8, "x={x}");
        }
    }
}
