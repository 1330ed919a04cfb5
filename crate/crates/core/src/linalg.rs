//! Minimal dense linear algebra for small symmetric matrices.
//!
//! Everything here operates on graphs with a few dozen nodes at most, so a
//! row-major `Vec<f64>` matrix and an O(n^3) cyclic Jacobi eigensolver are
//! the whole story. No external numeric backend.

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut m = Mat::zeros(r, c);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), c, "ragged rows");
            for (j, &v) in row.iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        m
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        let mut y = vec![0.0; self.rows];
        for i in 0..self.rows {
            let mut acc = 0.0;
            for j in 0..self.cols {
                acc += self[(i, j)] * x[j];
            }
            y[i] = acc;
        }
        y
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows);
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    /// Max-abs entry of the elementwise difference.
    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Eigendecomposition of a symmetric matrix: ascending eigenvalues with
/// matching eigenvectors as columns of `vectors`.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: Mat,
}

/// Cyclic Jacobi eigensolver for symmetric matrices.
///
/// Sweeps all upper-triangle pivots in row order, rotating each one to zero,
/// until the eigenvalue estimates move by less than `tol` between sweeps and
/// the off-diagonal mass is negligible.
pub fn jacobi_symmetric_eigen(a: &Mat, tol: f64, max_sweeps: usize) -> Result<SymmetricEigen> {
    assert_eq!(a.rows, a.cols, "matrix must be square");
    let n = a.rows;
    let mut d = a.clone();
    let mut v = Mat::identity(n);

    if n == 1 {
        return Ok(SymmetricEigen {
            values: vec![d[(0, 0)]],
            vectors: v,
        });
    }

    let mut prev: Vec<f64> = (0..n).map(|i| d[(i, i)]).collect();
    for sweep in 0..max_sweeps {
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = d[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = d[(p, p)];
                let aqq = d[(q, q)];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                for i in 0..n {
                    if i != p && i != q {
                        let dip = d[(i, p)];
                        let diq = d[(i, q)];
                        d[(i, p)] = c * dip - s * diq;
                        d[(p, i)] = d[(i, p)];
                        d[(i, q)] = s * dip + c * diq;
                        d[(q, i)] = d[(i, q)];
                    }
                }
                d[(p, p)] = c * c * app - 2.0 * s * c * apq + s * s * aqq;
                d[(q, q)] = s * s * app + 2.0 * s * c * apq + c * c * aqq;
                d[(p, q)] = 0.0;
                d[(q, p)] = 0.0;

                for i in 0..n {
                    let vip = v[(i, p)];
                    let viq = v[(i, q)];
                    v[(i, p)] = c * vip - s * viq;
                    v[(i, q)] = s * vip + c * viq;
                }
            }
        }

        let mut max_delta = 0.0f64;
        for i in 0..n {
            max_delta = max_delta.max((d[(i, i)] - prev[i]).abs());
            prev[i] = d[(i, i)];
        }
        let mut off = 0.0f64;
        for i in 0..n - 1 {
            for j in i + 1..n {
                off = off.max(d[(i, j)].abs());
            }
        }
        if max_delta < tol && off < tol {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&i, &j| d[(i, i)].total_cmp(&d[(j, j)]));
            let values: Vec<f64> = order.iter().map(|&i| d[(i, i)]).collect();
            let mut vectors = Mat::zeros(n, n);
            for (col, &src) in order.iter().enumerate() {
                for row in 0..n {
                    vectors[(row, col)] = v[(row, src)];
                }
            }
            return Ok(SymmetricEigen { values, vectors });
        }
        let _ = sweep;
    }
    Err(Error::EigenNoConvergence(max_sweeps))
}

pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
