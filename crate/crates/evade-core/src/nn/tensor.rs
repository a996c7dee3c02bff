//! Dense row-major f64 matrices, the value type every model in this crate
//! computes with.

use serde::{Deserialize, Serialize};

use super::NnError;

/// A rows x cols matrix of f64 stored row-major.
///
/// Vectors are represented as 1 x n (row) or n x 1 (column) matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, NnError> {
        if values.len() != rows * cols {
            return Err(NnError::ShapeMismatch {
                op: "from_vec",
                detail: format!(
                    "{} values for a {}x{} tensor",
                    values.len(),
                    rows,
                    cols
                ),
            });
        }
        Ok(Tensor2 { rows, cols, values })
    }

    /// Single-element tensor holding a scalar.
    pub fn scalar(v: f64) -> Self {
        Tensor2 {
            rows: 1,
            cols: 1,
            values: vec![v],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                values.push(f(i, j));
            }
        }
        Tensor2 { rows, cols, values }
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
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.values[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.values[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn zeros_like(&self) -> Self {
        Tensor2::zeros(self.rows, self.cols)
    }

    pub fn same_shape(&self, other: &Tensor2) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// Extract the single value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.values[0]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// self += alpha * other (shapes must match).
    pub fn axpy(&mut self, alpha: f64, other: &Tensor2) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.values.iter_mut().zip(other.values.iter()) {
            *a += alpha * b;
        }
    }
}

/// Which operand layout a gemm call should use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trans {
    No,
    Yes,
}

/// out = alpha * op(a) * op(b) + beta * out.
///
/// Shapes are validated against the logical (post-transpose) operand sizes.
pub fn gemm(
    alpha: f64,
    a: &Tensor2,
    ta: Trans,
    b: &Tensor2,
    tb: Trans,
    beta: f64,
    out: &mut Tensor2,
) {
    let (m, ka) = match ta {
        Trans::No => (a.rows, a.cols),
        Trans::Yes => (a.cols, a.rows),
    };
    let (kb, n) = match tb {
        Trans::No => (b.rows, b.cols),
        Trans::Yes => (b.cols, b.rows),
    };
    assert_eq!(ka, kb, "gemm inner dimension mismatch: {} vs {}", ka, kb);
    assert_eq!((out.rows, out.cols), (m, n), "gemm output shape mismatch");
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
            ka,
            n,
            alpha,
            a.values.as_ptr(),
            rsa,
            csa,
            b.values.as_ptr(),
            rsb,
            csb,
            beta,
            out.values.as_mut_ptr(),
            out.cols as isize,
            1,
        );
    }
}

/// Convenience: fresh tensor holding op(a) * op(b).
pub fn matmul(a: &Tensor2, ta: Trans, b: &Tensor2, tb: Trans) -> Tensor2 {
    let m = match ta {
        Trans::No => a.rows,
        Trans::Yes => a.cols,
    };
    let n = match tb {
        Trans::No => b.cols,
        Trans::Yes => b.rows,
    };
    let mut out = Tensor2::zeros(m, n);
    gemm(1.0, a, ta, b, tb, 0.0, &mut out);
    out
}
