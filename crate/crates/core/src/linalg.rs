//! Dense small-matrix kernels.
//!
//! Row-major [`Matrix`], sample covariance, lower Cholesky factorization
//! (`A = L Lᵀ`) and triangular solves. Everything here is a pure function of
//! its inputs.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative asymmetry tolerated by [`cholesky`] before symmetrization.
pub const SYMMETRY_TOLERANCE: f64 = 1e-8;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{} entries", rows * cols),
                format!("{} entries", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    /// Column vector from a slice.
    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("{} rows on the right", self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_transposed(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::shape(
                "matmul_transposed",
                format!("{} columns", self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out[(i, j)] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn transposed_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::shape(
                "transposed_matmul",
                format!("{} rows", self.rows),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        self.map(|v| v * factor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self += factor · other`.
    pub fn axpy(&mut self, factor: f64, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "axpy",
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Per-row arithmetic mean.
    pub fn row_means(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|i| self.row(i).iter().sum::<f64>() / self.cols as f64)
            .collect()
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = A`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpdFactor {
    lower: Matrix,
}

impl SpdFactor {
    /// Wraps an existing lower-triangular matrix. Diagonal entries are not
    /// checked here; [`solve_lower`] reports a zero pivot as singular.
    pub fn from_lower(lower: Matrix) -> Result<Self> {
        if lower.rows() != lower.cols() {
            return Err(Error::shape("SpdFactor", "square matrix", format!("{:?}", lower.shape())));
        }
        for i in 0..lower.rows() {
            for j in (i + 1)..lower.cols() {
                if lower[(i, j)] != 0.0 {
                    return Err(Error::Config(format!(
                        "factor is not lower-triangular: entry ({i}, {j}) = {}",
                        lower[(i, j)]
                    )));
                }
            }
        }
        Ok(Self { lower })
    }

    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    pub fn dim(&self) -> usize {
        self.lower.rows()
    }

    /// `L Lᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        self.lower
            .matmul_transposed(&self.lower)
            .expect("square factor")
    }

    /// `L · b`, exploiting the triangular structure.
    pub fn mul(&self, b: &Matrix) -> Result<Matrix> {
        let n = self.dim();
        if b.rows() != n {
            return Err(Error::shape("SpdFactor::mul", format!("{n} rows"), b.rows()));
        }
        let mut out = Matrix::zeros(n, b.cols());
        for i in 0..n {
            for k in 0..=i {
                let l = self.lower[(i, k)];
                if l == 0.0 {
                    continue;
                }
                for c in 0..b.cols() {
                    out[(i, c)] += l * b[(k, c)];
                }
            }
        }
        Ok(out)
    }

    /// `Lᵀ · b`.
    pub fn mul_transpose(&self, b: &Matrix) -> Result<Matrix> {
        let n = self.dim();
        if b.rows() != n {
            return Err(Error::shape("SpdFactor::mul_transpose", format!("{n} rows"), b.rows()));
        }
        let mut out = Matrix::zeros(n, b.cols());
        for i in 0..n {
            for k in i..n {
                let l = self.lower[(k, i)];
                if l == 0.0 {
                    continue;
                }
                for c in 0..b.cols() {
                    out[(i, c)] += l * b[(k, c)];
                }
            }
        }
        Ok(out)
    }

    /// Solves `Lᵀ X = b` by back substitution.
    pub fn solve_transpose(&self, b: &Matrix) -> Result<Matrix> {
        let n = self.dim();
        if b.rows() != n {
            return Err(Error::shape("solve_transpose", format!("{n} rows"), b.rows()));
        }
        let mut x = b.clone();
        for c in 0..b.cols() {
            for i in (0..n).rev() {
                let mut sum = x[(i, c)];
                for k in (i + 1)..n {
                    sum -= self.lower[(k, i)] * x[(k, c)];
                }
                let d = self.lower[(i, i)];
                if d == 0.0 {
                    return Err(Error::Singular { index: i });
                }
                x[(i, c)] = sum / d;
            }
        }
        Ok(x)
    }
}

/// Covariance of the rows of a `C x S` sample matrix, normalized by `S`.
///
/// When `already_centered` is false the row means are subtracted first.
pub fn covariance(samples: &Matrix, already_centered: bool) -> Result<Matrix> {
    let (c, s) = samples.shape();
    if s == 0 {
        return Err(Error::EmptyInput("covariance needs at least one position"));
    }
    let centered = if already_centered {
        samples.clone()
    } else {
        center_rows(samples)
    };
    let norm = 1.0 / s as f64;
    let mut cov = Matrix::zeros(c, c);
    for i in 0..c {
        for j in 0..=i {
            let v = dot(centered.row(i), centered.row(j)) * norm;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok(cov)
}

/// Subtracts each row's mean from that row.
pub fn center_rows(samples: &Matrix) -> Matrix {
    let means = samples.row_means();
    let mut out = samples.clone();
    for (i, mu) in means.iter().enumerate() {
        for v in out.row_mut(i) {
            *v -= mu;
        }
    }
    out
}

/// Lower Cholesky factorization of a symmetric positive-definite matrix.
///
/// The input is symmetrized as `(A + Aᵀ)/2` after checking that its relative
/// asymmetry is within [`SYMMETRY_TOLERANCE`].
pub fn cholesky(a: &Matrix) -> Result<SpdFactor> {
    let (n, m) = a.shape();
    if n != m {
        return Err(Error::shape("cholesky", "square matrix", format!("{n}x{m}")));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("cholesky input"));
    }
    let scale = a.max_abs();
    let mut asym = 0.0f64;
    for i in 0..n {
        for j in 0..i {
            asym = asym.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    if scale > 0.0 && asym / scale > SYMMETRY_TOLERANCE {
        return Err(Error::NotSymmetric {
            asymmetry: asym / scale,
        });
    }

    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut pivot = a[(j, j)];
        for k in 0..j {
            pivot -= l[(j, k)] * l[(j, k)];
        }
        if !(pivot > 0.0) {
            return Err(Error::NotPositiveDefinite { pivot: j, value: pivot });
        }
        let d = pivot.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut sum = 0.5 * (a[(i, j)] + a[(j, i)]);
            for k in 0..j {
                sum -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = sum / d;
        }
    }
    Ok(SpdFactor { lower: l })
}

/// `A + εI`.
pub fn regularize_spd(a: &Matrix, epsilon: f64) -> Matrix {
    let mut out = a.clone();
    for i in 0..a.rows().min(a.cols()) {
        out[(i, i)] += epsilon;
    }
    out
}

/// Solves `L X = b` by forward substitution.
pub fn solve_lower(l: &SpdFactor, b: &Matrix) -> Result<Matrix> {
    let n = l.dim();
    if b.rows() != n {
        return Err(Error::shape("solve_lower", format!("{n} rows"), b.rows()));
    }
    let lower = l.lower();
    let mut x = b.clone();
    for c in 0..b.cols() {
        for i in 0..n {
            let mut sum = x[(i, c)];
            for k in 0..i {
                sum -= lower[(i, k)] * x[(k, c)];
            }
            let d = lower[(i, i)];
            if d == 0.0 {
                return Err(Error::Singular { index: i });
            }
            x[(i, c)] = sum / d;
        }
    }
    Ok(x)
}
