//! Dense f64 kernels shared by the compute graph and the inference path.
//!
//! Everything is row-major and double precision. The recorded
//! (differentiable) forward and the plain inference forward call the
//! same routines, so the two paths produce identical values for
//! identical inputs.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("invalid temperature {0}: must be > 0")]
    InvalidTemperature(f64),
    #[error("invalid input: non-finite logit at index {0}")]
    NonFiniteLogit(usize),
    #[error("empty logit vector")]
    EmptyLogits,
}

/// Row-major dense matrix of f64. A scalar is `1x1`, a column vector
/// `n x 1`, a row vector `1 x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Matrix { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Matrix { rows: 1, cols: 1, data: vec![v] }
    }

    /// Column vector from a slice.
    pub fn column(v: &[f64]) -> Self {
        Matrix { rows: v.len(), cols: 1, data: v.to_vec() }
    }

    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn transposed(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }
}

/// Whether an operand of [`gemm`] is taken transposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trans {
    No,
    Yes,
}

/// `c = alpha * op(a) @ op(b) + beta * c`, backed by matrixmultiply's
/// dgemm. Transposition is expressed through strides; no copies.
pub fn gemm(alpha: f64, a: &Matrix, ta: Trans, b: &Matrix, tb: Trans, beta: f64, c: &mut Matrix) {
    let (m, k) = match ta {
        Trans::No => (a.rows, a.cols),
        Trans::Yes => (a.cols, a.rows),
    };
    let (kb, n) = match tb {
        Trans::No => (b.rows, b.cols),
        Trans::Yes => (b.cols, b.rows),
    };
    assert_eq!(k, kb, "gemm inner dimension mismatch: {k} vs {kb}");
    assert_eq!((c.rows, c.cols), (m, n), "gemm output shape mismatch");
    let (rsa, csa) = match ta {
        Trans::No => (a.cols as isize, 1),
        Trans::Yes => (1, a.cols as isize),
    };
    let (rsb, csb) = match tb {
        Trans::No => (b.cols as isize, 1),
        Trans::Yes => (1, b.cols as isize),
    };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `a @ b` into a fresh matrix.
pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let mut c = Matrix::zeros(a.rows, b.cols);
    gemm(1.0, a, Trans::No, b, Trans::No, 0.0, &mut c);
    c
}

/// Temperature softmax of one logit slice, with max-subtraction for
/// stability. Validates the operation contract: `t > 0`, finite logits,
/// non-empty input. Output entries are positive and sum to 1.
pub fn softmax_with_temperature(logits: &[f64], t: f64) -> Result<Vec<f64>, KernelError> {
    if logits.is_empty() {
        return Err(KernelError::EmptyLogits);
    }
    if !(t > 0.0) {
        return Err(KernelError::InvalidTemperature(t));
    }
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(KernelError::NonFiniteLogit(i));
    }
    Ok(softmax_with_temperature_unchecked(logits, t))
}

/// Softmax body without contract checks; callers on hot paths validate
/// once up front.
pub fn softmax_with_temperature_unchecked(logits: &[f64], t: f64) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| ((z - m) / t).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Row-wise temperature softmax of a matrix.
pub fn softmax_rows(x: &Matrix, t: f64) -> Matrix {
    let mut out = Matrix::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let p = softmax_with_temperature_unchecked(x.row(r), t);
        out.row_mut(r).copy_from_slice(&p);
    }
    out
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise layer norm with learned gain/bias (`gain`, `bias` are `1 x d`).
/// Returns `(y, mean, rstd)`; the per-row stats feed the backward pass.
pub fn layer_norm_rows(x: &Matrix, gain: &[f64], bias: &[f64]) -> (Matrix, Vec<f64>, Vec<f64>) {
    let d = x.cols;
    assert_eq!(gain.len(), d);
    assert_eq!(bias.len(), d);
    let mut y = Matrix::zeros(x.rows, d);
    let mut means = vec![0.0; x.rows];
    let mut rstds = vec![0.0; x.rows];
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let out = y.row_mut(r);
        for i in 0..d {
            out[i] = (row[i] - mean) * rstd * gain[i] + bias[i];
        }
        means[r] = mean;
        rstds[r] = rstd;
    }
    (y, means, rstds)
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = GELU_K * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetry() {
        let p = softmax_with_temperature(&[0.0, 0.0], 1.0).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_identical_logits_any_temperature() {
        let p = softmax_with_temperature(&[3.3, 3.3, 3.3, 3.3], 2.0).unwrap();
        for v in p {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_two_logits_reference_value() {
        let p = softmax_with_temperature(&[1.0, 0.0], 1.0).unwrap();
        assert!((p[0] - 0.73106).abs() < 1e-5);
        assert!((p[1] - 0.26894).abs() < 1e-5);
    }

    #[test]
    fn softmax_rejects_bad_inputs() {
        assert_eq!(
            softmax_with_temperature(&[0.0], 0.0),
            Err(KernelError::InvalidTemperature(0.0))
        );
        assert_eq!(
            softmax_with_temperature(&[0.0], -1.0),
            Err(KernelError::InvalidTemperature(-1.0))
        );
        assert_eq!(
            softmax_with_temperature(&[0.0, f64::NAN], 1.0),
            Err(KernelError::NonFiniteLogit(1))
        );
        assert_eq!(softmax_with_temperature(&[], 1.0), Err(KernelError::EmptyLogits));
    }

    #[test]
    fn softmax_stable_under_large_magnitudes() {
        for &scale in &[1.0, 100.0, 1e4] {
            let logits = [scale, -scale, scale / 2.0, 0.0];
            let p = softmax_with_temperature(&logits, 1.0).unwrap();
            let sum: f64 = p.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "sum={sum} at scale {scale}");
        }
    }

    #[test]
    fn gemm_matches_naive() {
        let a = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Matrix::from_vec(3, 1, vec![1.0, 0.5, -1.0]);
        let c = matmul(&a, &b);
        assert_eq!(c.shape(), (2, 1));
        assert!((c.at(0, 0) - (1.0 + 1.0 - 3.0)).abs() < 1e-14);
        assert!((c.at(1, 0) - (4.0 + 2.5 - 6.0)).abs() < 1e-14);
    }

    #[test]
    fn gemm_transpose_strides() {
        let a = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let at = a.transposed();
        let mut c1 = Matrix::zeros(3, 3);
        gemm(1.0, &a, Trans::Yes, &a, Trans::No, 0.0, &mut c1);
        let c2 = matmul(&at, &a);
        for (x, y) in c1.data.iter().zip(c2.data.iter()) {
            assert!((x - y).abs() < 1e-13);
        }
    }

    #[test]
    fn layer_norm_rows_normalizes() {
        let x = Matrix::from_vec(1, 4, vec![1.0, 2.0, 3.0, 4.0]);
        let (y, _, _) = layer_norm_rows(&x, &[1.0; 4], &[0.0; 4]);
        let mean: f64 = y.row(0).iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
    }
}
