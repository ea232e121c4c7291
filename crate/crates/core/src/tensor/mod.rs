//! Dense 2-D tensors with reverse-mode automatic differentiation.
//!
//! The [`Tensor`] type is the value carrier for the whole crate: a row-major
//! `f64` matrix (vectors are 1xN or Nx1). Differentiable computations are
//! recorded on a [`Tape`]; calling [`Tape::backward`] walks the recorded
//! operations in reverse and accumulates gradients into every node that
//! requires them. Long-lived parameters live in a [`ParamStore`] and are
//! staged onto a fresh tape per forward pass, after which
//! [`Tape::harvest_grads`] adds the tape gradients back into the store.
//!
//! Gradients accumulate across backward calls until
//! [`ParamStore::zero_grads`] is invoked, which is what lets one optimizer
//! step consume gradients from several recorded passes (batching).

mod adamw;
mod store;
mod tape;

pub use adamw::{AdamWConfig, AdamWState};
pub use store::{ParamId, ParamStore};
pub use tape::{Mode, Tape, Var};

use thiserror::Error;

/// Errors raised by tensor construction, tape operations, and the optimizer.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {lhs_rows}x{lhs_cols} and {rhs_rows}x{rhs_cols}")]
    DimMismatch {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },
    #[error("tensor data length {len} does not match shape {rows}x{cols}")]
    BadShape { rows: usize, cols: usize, len: usize },
    #[error("softmax row {row} is fully masked")]
    DegenerateRow { row: usize },
    #[error("dropout rate {rate} is outside [0, 1)")]
    DropoutRate { rate: f64 },
    #[error("leaky_relu slope {slope} is outside [0, 1)")]
    Slope { slope: f64 },
    #[error("backward target must be a 1x1 scalar, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("{op}: index {index} out of range for {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("optimizer state for '{name}' has {state} entries but parameter has {param}")]
    StateShape {
        name: String,
        state: usize,
        param: usize,
    },
}

/// Row-major dense matrix of `f64` with optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor from row-major data. Fails when `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::BadShape {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self {
            rows,
            cols,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
            requires_grad: false,
            grad: None,
        }
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Single-row tensor (shape 1xN).
    pub fn row(data: Vec<f64>) -> Self {
        let cols = data.len();
        Self {
            rows: 1,
            cols,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Single-column tensor (shape Nx1).
    pub fn col(data: Vec<f64>) -> Self {
        let rows = data.len();
        Self {
            rows,
            cols: 1,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::row(vec![value])
    }

    /// Builds from nested rows; all rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(TensorError::BadShape {
                    rows: r,
                    cols: c,
                    len: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::from_vec(r, c, data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
        self
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
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub(crate) fn grad_mut(&mut self) -> &mut [f64] {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
        self.grad.as_mut().unwrap()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// True when every entry is finite (no NaN/Inf).
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Scalar value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Frobenius norm, used for gradient diagnostics.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

// Raw kernels shared by forward and backward paths. `mm_nt` and `mm_tn`
// avoid materializing transposes in the gradient rules.

/// C += A(m x k) * B(k x n), row-major.
pub(crate) fn mm_acc(c: &mut [f64], a: &[f64], m: usize, k: usize, b: &[f64], n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// C += A(m x k) * B(n x k)^T, row-major.
pub(crate) fn mm_nt_acc(c: &mut [f64], a: &[f64], m: usize, k: usize, b: &[f64], n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            c[i * n + j] += s;
        }
    }
}

/// C += A(k x m)^T * B(k x n), row-major.
pub(crate) fn mm_tn_acc(c: &mut [f64], a: &[f64], k: usize, m: usize, b: &[f64], n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_length_mismatch() {
        let err = Tensor::from_vec(2, 3, vec![1.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::BadShape { len: 5, .. }));
    }

    #[test]
    fn eye_and_accessors() {
        let t = Tensor::eye(3);
        assert_eq!(t.shape(), (3, 3));
        assert_eq!(t.at(1, 1), 1.0);
        assert_eq!(t.at(1, 2), 0.0);
    }

    #[test]
    fn raw_kernels_agree_with_naive_product() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = vec![0.0; 4];
        mm_acc(&mut c, &a, 2, 3, &b, 2);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);

        // a * transpose(b2) where b2 is 2x3, must equal a * b when b = b2^T
        let b2 = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0]; // 2x3, transpose of b
        let mut c2 = vec![0.0; 4];
        mm_nt_acc(&mut c2, &a, 2, 3, &b2, 2);
        assert_eq!(c2, c);

        // transpose(a2) * b where a2 is 3x2, a2^T = a
        let a2 = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]; // 3x2
        let mut c3 = vec![0.0; 4];
        mm_tn_acc(&mut c3, &a2, 3, 2, &b, 2);
        assert_eq!(c3, c);
    }
}
