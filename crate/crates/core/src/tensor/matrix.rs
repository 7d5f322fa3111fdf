//! Dense row-major matrices of `f64`.

use std::fmt;

use crate::error::{Result, TartError};

/// Largest accepted ratio between the biggest and smallest LU pivot magnitude.
pub const MAX_PIVOT_RATIO: f64 = 1e12;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from external data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TartError::shape(
                "from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(TartError::NonFinite(format!(
                "entry ({}, {}) is {}",
                pos / cols.max(1),
                pos % cols.max(1),
                data[pos]
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TartError::shape("from_rows", "ragged rows"));
        }
        Matrix::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn row_vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Matrix::from_vec(1, n, data)
    }

    pub fn scalar(value: f64) -> Self {
        Matrix {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    /// Unchecked constructor for results computed inside the crate.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_raw(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        self.map(|v| v * factor)
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(TartError::shape(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(Matrix::from_raw(
            self.rows,
            self.cols,
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    /// `self += factor * other`, shapes must agree.
    pub(crate) fn add_scaled_assign(&mut self, other: &Matrix, factor: f64) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(TartError::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm_nn(self, other, &mut out);
        Ok(out)
    }

    /// Column-wise mean, a `1 x cols` row.
    pub fn mean_rows(&self) -> Result<Matrix> {
        if self.rows == 0 {
            return Err(TartError::EmptyInput("mean_rows of a matrix with no rows".into()));
        }
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        let m = self.rows as f64;
        out.iter_mut().for_each(|o| *o /= m);
        Ok(Matrix::from_raw(1, self.cols, out))
    }

    /// Inverse by LU decomposition with partial pivoting.
    ///
    /// Fails when a pivot vanishes or the ratio between the largest and
    /// smallest pivot magnitude exceeds [`MAX_PIVOT_RATIO`].
    pub fn inverse(&self) -> Result<Matrix> {
        if self.rows != self.cols {
            return Err(TartError::shape("inverse", format!("{:?} is not square", self.shape())));
        }
        let n = self.rows;
        if n == 0 {
            return Err(TartError::EmptyInput("inverse of a 0x0 matrix".into()));
        }
        let mut lu = self.data.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut pivot_max = 0.0f64;
        let mut pivot_min = f64::INFINITY;
        for k in 0..n {
            let (p, best) = (k..n)
                .map(|r| (r, lu[r * n + k].abs()))
                .fold((k, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
            if best <= 0.0 || !best.is_finite() {
                return Err(TartError::SingularMatrix {
                    pivot_ratio: f64::INFINITY,
                });
            }
            pivot_max = pivot_max.max(best);
            pivot_min = pivot_min.min(best);
            if p != k {
                for c in 0..n {
                    lu.swap(k * n + c, p * n + c);
                }
                perm.swap(k, p);
            }
            let pivot = lu[k * n + k];
            for r in k + 1..n {
                let factor = lu[r * n + k] / pivot;
                lu[r * n + k] = factor;
                if factor != 0.0 {
                    for c in k + 1..n {
                        lu[r * n + c] -= factor * lu[k * n + c];
                    }
                }
            }
        }
        let ratio = pivot_max / pivot_min;
        if ratio > MAX_PIVOT_RATIO {
            return Err(TartError::SingularMatrix { pivot_ratio: ratio });
        }

        let mut inv = Matrix::zeros(n, n);
        let mut col = vec![0.0; n];
        for j in 0..n {
            // solve L y = P e_j
            for i in 0..n {
                let mut s = if perm[i] == j { 1.0 } else { 0.0 };
                for t in 0..i {
                    s -= lu[i * n + t] * col[t];
                }
                col[i] = s;
            }
            // solve U x = y
            for i in (0..n).rev() {
                let mut s = col[i];
                for t in i + 1..n {
                    s -= lu[i * n + t] * col[t];
                }
                col[i] = s / lu[i * n + i];
            }
            for i in 0..n {
                inv.data[i * n + j] = col[i];
            }
        }
        Ok(inv)
    }
}

/// `out += a * b`
pub(crate) fn gemm_nn(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    let (m, k) = a.shape();
    let n = b.cols;
    debug_assert_eq!(b.rows, k);
    debug_assert_eq!(out.shape(), (m, n));
    for i in 0..m {
        let out_row = &mut out.data[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a.data[i * k + t];
            if av == 0.0 {
                continue;
            }
            let b_row = &b.data[t * n..(t + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a * b^T`
pub(crate) fn gemm_nt(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    let (m, k) = a.shape();
    let n = b.rows;
    debug_assert_eq!(b.cols, k);
    debug_assert_eq!(out.shape(), (m, n));
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b.data[j * k..(j + 1) * k];
            out.data[i * n + j] += dot(a_row, b_row);
        }
    }
}

/// `out += a^T * b`
pub(crate) fn gemm_tn(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    let (k, m) = a.shape();
    let n = b.cols;
    debug_assert_eq!(b.rows, k);
    debug_assert_eq!(out.shape(), (m, n));
    for t in 0..k {
        let b_row = &b.data[t * n..(t + 1) * n];
        for i in 0..m {
            let av = a.data[t * m + i];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
