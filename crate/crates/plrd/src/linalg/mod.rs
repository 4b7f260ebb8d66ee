//! Deterministic dense linear algebra: row-major `f64` matrices, fixed-order
//! products, Frobenius norms and a full SVD with a reproducible sign
//! convention.
//!
//! Every operation here is a pure function with a fixed summation order, so
//! results are bitwise identical across runs and across the sequential and
//! rayon-parallel kernels (parallelism only splits work across disjoint
//! output rows).

pub mod kernels;
mod svd;

pub use svd::{svd, SvdFactors};

use crate::error::{Error, Result};

/// A dense 2-D weight of shape `rows x cols` (`d_in x d_out`), row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// Builds a matrix from row-major data, validating length and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!("matrix dimensions must be positive, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::DataLength { rows, cols, len: data.len() });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|row| row.len()).unwrap_or(0);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(r, c, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Frobenius norm, summed in flat index order.
    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        matmul(self, other)
    }

    /// `self - other`, elementwise. Shapes must match.
    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "sub: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }
}

/// `sqrt(sum w_ij^2)`; zero iff `w` is the zero matrix.
pub fn frobenius_norm(w: &DenseMatrix) -> f64 {
    w.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `a · b` with a fixed summation order (ascending inner index), so the
/// result is bitwise deterministic for fixed inputs regardless of the
/// `parallel` feature.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    check_inner(a.cols, b.rows, "matmul")?;
    let mut out = DenseMatrix::zeros(a.rows, b.cols);
    #[cfg(feature = "parallel")]
    kernels::matmul_par(a.data(), b.data(), a.rows, a.cols, b.cols, out.data_mut());
    #[cfg(not(feature = "parallel"))]
    kernels::matmul_seq(a.data(), b.data(), a.rows, a.cols, b.cols, out.data_mut());
    Ok(out)
}

/// `a · bᵀ` (`b` given untransposed, shape `n x k` with `k == a.cols`).
pub fn matmul_transpose_b(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    check_inner(a.cols, b.cols, "matmul_transpose_b")?;
    let mut out = DenseMatrix::zeros(a.rows, b.rows);
    #[cfg(feature = "parallel")]
    kernels::matmul_tb_par(a.data(), b.data(), a.rows, a.cols, b.rows, out.data_mut());
    #[cfg(not(feature = "parallel"))]
    kernels::matmul_tb_seq(a.data(), b.data(), a.rows, a.cols, b.rows, out.data_mut());
    Ok(out)
}

/// `aᵀ · b` (`a` given untransposed, shape `k x m` with `k == b.rows`).
pub fn matmul_transpose_a(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    check_inner(a.rows, b.rows, "matmul_transpose_a")?;
    let mut out = DenseMatrix::zeros(a.cols, b.cols);
    #[cfg(feature = "parallel")]
    kernels::matmul_ta_par(a.data(), b.data(), a.rows, a.cols, b.cols, out.data_mut());
    #[cfg(not(feature = "parallel"))]
    kernels::matmul_ta_seq(a.data(), b.data(), a.rows, a.cols, b.cols, out.data_mut());
    Ok(out)
}

fn check_inner(lhs: usize, rhs: usize, op: &str) -> Result<()> {
    if lhs != rhs {
        return Err(Error::Shape(format!("{op}: inner dimensions {lhs} vs {rhs}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length() {
        assert!(matches!(
            DenseMatrix::new(2, 2, vec![1.0; 3]),
            Err(Error::DataLength { .. })
        ));
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(matches!(
            DenseMatrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite(1))
        ));
    }

    #[test]
    fn new_rejects_zero_dims() {
        assert!(DenseMatrix::new(0, 3, vec![]).is_err());
    }

    #[test]
    fn matmul_shape_error() {
        let a = DenseMatrix::zeros(2, 3);
        let b = DenseMatrix::zeros(2, 2);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn transpose_round_trip() {
        let m = DenseMatrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(m.transpose().transpose(), m);
        assert_eq!(m.transpose().get(2, 1), 6.0);
    }

    #[test]
    fn transpose_variants_match_explicit_transpose() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let b = DenseMatrix::from_rows(&[vec![1.0, -1.0], vec![0.5, 2.0], vec![3.0, 0.0]]).unwrap();
        let tb = matmul_transpose_b(&a, &b).unwrap();
        let tb_ref = matmul(&a, &b.transpose()).unwrap();
        assert_eq!(tb, tb_ref);

        let ta = matmul_transpose_a(&a, &b).unwrap();
        let ta_ref = matmul(&a.transpose(), &b).unwrap();
        assert_eq!(ta, ta_ref);
    }
}
