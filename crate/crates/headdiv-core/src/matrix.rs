//! Dense row-major `f64` matrix kernel.
//!
//! Forward operations come paired with explicit vector-Jacobian products
//! (`*_vjp`) so callers can compose exact reverse-mode gradients over a
//! small, fixed computation graph without a tape.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Index, IndexMut};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

/// Dense 2-D array of 64-bit reals in row-major order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::new(raw.rows, raw.cols, raw.data)
    }
}

impl Matrix {
    /// Builds a matrix from a row-major buffer, checking the length invariant.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DataLength {
                rows,
                cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from equal-length rows. Handy in tests.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::ShapeMismatch {
                    op: "from_rows",
                    left: (1, c),
                    right: (1, row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: r,
            cols: c,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[(c, r)] = self[(r, c)];
            }
        }
        out
    }

    /// Standard matrix product.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let a_row = self.row(r);
            let out_row = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = other.row(k);
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    fn zip_with(
        &self,
        op: &'static str,
        other: &Matrix,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    /// Element-wise product.
    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("hadamard", other, |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "add_assign",
                left: self.shape(),
                right: other.shape(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Sum of all entries.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Largest absolute entry (0 for an empty matrix).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &v| m.max(math::abs(v)))
    }

    /// Sum of element-wise products; the Frobenius inner product.
    pub fn dot(&self, other: &Matrix) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "dot",
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(parts: &[&Matrix]) -> Result<Matrix> {
        let rows = parts.first().map_or(0, |m| m.rows);
        let cols: usize = parts.iter().map(|m| m.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for part in parts {
            if part.rows != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: (rows, cols),
                    right: part.shape(),
                });
            }
            for r in 0..rows {
                let dst = &mut out.data[r * cols + offset..r * cols + offset + part.cols];
                dst.copy_from_slice(part.row(r));
            }
            offset += part.cols;
        }
        Ok(out)
    }

    /// Copies the column block `[start, start + width)` out of the matrix.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Matrix> {
        if start + width > self.cols {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                left: self.shape(),
                right: (start, width),
            });
        }
        let mut out = Matrix::zeros(self.rows, width);
        for r in 0..self.rows {
            out.data[r * width..(r + 1) * width]
                .copy_from_slice(&self.row(r)[start..start + width]);
        }
        Ok(out)
    }

    /// Row-wise softmax with per-row max subtraction for stability.
    pub fn row_softmax(&self) -> Matrix {
        let mut out = self.clone();
        for r in 0..self.rows {
            let row = &mut out.data[r * self.cols..(r + 1) * self.cols];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = math::exp(*v - max);
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        out
    }

    /// Divides each row by its Euclidean norm; rows with norm below `eps`
    /// become all-zero rows instead of erroring.
    pub fn row_normalize(&self, eps: f64) -> Matrix {
        let mut out = self.clone();
        for r in 0..self.rows {
            let row = &mut out.data[r * self.cols..(r + 1) * self.cols];
            let norm = math::sqrt(row.iter().map(|v| v * v).sum());
            if norm < eps {
                row.fill(0.0);
            } else {
                for v in row.iter_mut() {
                    *v /= norm;
                }
            }
        }
        out
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// VJP of `c = a.matmul(b)`: given upstream `g = dL/dc`, returns
/// `(dL/da, dL/db) = (g b^T, a^T g)`.
pub fn matmul_vjp(a: &Matrix, b: &Matrix, g: &Matrix) -> Result<(Matrix, Matrix)> {
    if g.shape() != (a.rows(), b.cols()) {
        return Err(Error::ShapeMismatch {
            op: "matmul_vjp",
            left: (a.rows(), b.cols()),
            right: g.shape(),
        });
    }
    let da = g.matmul(&b.transpose())?;
    let db = a.transpose().matmul(g)?;
    Ok((da, db))
}

/// VJP of `s = z.row_softmax()` expressed in terms of the softmax output:
/// per row, `dz = s ⊙ (g - <g, s>)`.
pub fn row_softmax_vjp(softmax_out: &Matrix, g: &Matrix) -> Result<Matrix> {
    if softmax_out.shape() != g.shape() {
        return Err(Error::ShapeMismatch {
            op: "row_softmax_vjp",
            left: softmax_out.shape(),
            right: g.shape(),
        });
    }
    let (rows, cols) = softmax_out.shape();
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let s = softmax_out.row(r);
        let gr = g.row(r);
        let dot: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
        let dst = &mut out.data_mut()[r * cols..(r + 1) * cols];
        for ((d, &sv), &gv) in dst.iter_mut().zip(s).zip(gr) {
            *d = sv * (gv - dot);
        }
    }
    Ok(out)
}

/// VJP of `y = x.row_normalize(eps)`. Rows mapped to zero propagate a zero
/// gradient; for live rows, `dx = (g - <g, y> y) / ||x||`.
pub fn row_normalize_vjp(x: &Matrix, eps: f64, g: &Matrix) -> Result<Matrix> {
    if x.shape() != g.shape() {
        return Err(Error::ShapeMismatch {
            op: "row_normalize_vjp",
            left: x.shape(),
            right: g.shape(),
        });
    }
    let (rows, cols) = x.shape();
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let xr = x.row(r);
        let norm = math::sqrt(xr.iter().map(|v| v * v).sum());
        if norm < eps {
            continue;
        }
        let gr = g.row(r);
        let dot: f64 = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / norm;
        let dst = &mut out.data_mut()[r * cols..(r + 1) * cols];
        for ((d, &gv), &xv) in dst.iter_mut().zip(gr).zip(xr) {
            *d = (gv - dot * xv / norm) / norm;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{fd_gradient, matrix_rel_error};
    use crate::rng::SeededRng;

    fn random_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.uniform(-1.0, 1.0))
    }

    #[test]
    fn identity_matmul_preserves_operand() {
        let m = Matrix::from_rows(&[vec![1.0, -2.0, 3.5], vec![0.0, 4.0, -1.0]]).unwrap();
        let id = Matrix::identity(2);
        assert_eq!(id.matmul(&m).unwrap(), m);
    }

    #[test]
    fn matmul_matches_hand_product() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c, Matrix::from_rows(&[vec![17.0], vec![39.0]]).unwrap());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        let err = a.matmul(&b).unwrap_err();
        assert_eq!(
            err,
            Error::ShapeMismatch {
                op: "matmul",
                left: (2, 3),
                right: (2, 3)
            }
        );
    }

    #[test]
    fn matmul_agrees_with_triple_loop_oracle() {
        let mut rng = SeededRng::from_seed(11);
        for _ in 0..10 {
            let a = random_matrix(&mut rng, 5, 7);
            let b = random_matrix(&mut rng, 7, 3);
            let fast = a.matmul(&b).unwrap();
            let mut naive = Matrix::zeros(5, 3);
            for i in 0..5 {
                for j in 0..3 {
                    let mut acc = 0.0;
                    for k in 0..7 {
                        acc += a[(i, k)] * b[(k, j)];
                    }
                    naive[(i, j)] = acc;
                }
            }
            assert!(matrix_rel_error(&fast, &naive) <= 1e-12);
        }
    }

    #[test]
    fn softmax_symmetric_row() {
        let s = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap().row_softmax();
        assert!((s[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((s[(0, 1)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_survives_large_logits() {
        let s = Matrix::from_rows(&[vec![1000.0, 1000.0, 1000.0]])
            .unwrap()
            .row_softmax();
        for c in 0..3 {
            assert!((s[(0, c)] - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_matches_definition() {
        let s = Matrix::from_rows(&[vec![2.0_f64.ln(), 0.0]])
            .unwrap()
            .row_softmax();
        assert!((s[(0, 0)] - 2.0 / 3.0).abs() < 1e-12);
        assert!((s[(0, 1)] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_three_four_five() {
        let n = Matrix::from_rows(&[vec![3.0, 4.0]])
            .unwrap()
            .row_normalize(1e-12);
        assert!((n[(0, 0)] - 0.6).abs() < 1e-15);
        assert!((n[(0, 1)] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalize_zero_row_stays_zero() {
        let n = Matrix::from_rows(&[vec![0.0, 0.0]])
            .unwrap()
            .row_normalize(1e-12);
        assert_eq!(n, Matrix::zeros(1, 2));
    }

    #[test]
    fn matmul_vjp_matches_finite_differences() {
        let mut rng = SeededRng::from_seed(3);
        let a = random_matrix(&mut rng, 3, 4);
        let b = random_matrix(&mut rng, 4, 2);
        let g = Matrix::filled(3, 2, 1.0);
        let (da, db) = matmul_vjp(&a, &b, &g).unwrap();

        let fd_a = fd_gradient(|x| x.matmul(&b).unwrap().dot(&g).unwrap(), &a, 1e-6);
        let fd_b = fd_gradient(|x| a.matmul(x).unwrap().dot(&g).unwrap(), &b, 1e-6);
        assert!(matrix_rel_error(&da, &fd_a) <= 1e-6);
        assert!(matrix_rel_error(&db, &fd_b) <= 1e-6);
    }

    #[test]
    fn row_normalize_vjp_matches_finite_differences() {
        let mut rng = SeededRng::from_seed(4);
        let x = random_matrix(&mut rng, 3, 4);
        let g = random_matrix(&mut rng, 3, 4);
        let analytic = row_normalize_vjp(&x, 1e-12, &g).unwrap();
        let fd = fd_gradient(
            |m| m.row_normalize(1e-12).dot(&g).unwrap(),
            &x,
            1e-6,
        );
        assert!(matrix_rel_error(&analytic, &fd) <= 1e-6);
    }

    #[test]
    fn row_softmax_vjp_matches_finite_differences() {
        let mut rng = SeededRng::from_seed(5);
        for _ in 0..5 {
            let x = random_matrix(&mut rng, 3, 5);
            let g = random_matrix(&mut rng, 3, 5);
            let s = x.row_softmax();
            let analytic = row_softmax_vjp(&s, &g).unwrap();
            let fd = fd_gradient(|m| m.row_softmax().dot(&g).unwrap(), &x, 1e-6);
            assert!(matrix_rel_error(&analytic, &fd) <= 1e-5);
        }
    }
}
