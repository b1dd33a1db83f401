//! Dense small-matrix numerics.
//!
//! Row-major `f64` storage throughout. Everything here is sized for filter
//! covariances (a handful of rows); the large GRU weight matrices live in
//! [`crate::neural`] as flat slices and never pass through this module.
//!
//! No explicit inverse is offered: linear systems with an SPD left-hand side
//! go through [`cholesky`] and [`SpdFactor::solve`].

use std::fmt;
use std::ops::{Deref, DerefMut, Index, IndexMut};

use thiserror::Error;

/// Pivots at or below this value are treated as a loss of definiteness.
pub const PIVOT_FLOOR: f64 = 1e-12;

/// Relative asymmetry accepted by [`cholesky`] and [`jacobi_eigen`].
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Sweep budget for [`jacobi_eigen`].
pub const MAX_JACOBI_SWEEPS: usize = 100;

const OFF_DIAGONAL_TOL: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot:e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("jacobi eigendecomposition did not converge after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("non-finite entry at position {index}")]
    NonFinite { index: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, LinalgError>;

fn check_finite(data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(LinalgError::NonFinite { index }),
        None => Ok(()),
    }
}

/// Dot product with four independent accumulators.
///
/// The fixed accumulation order keeps results identical across platforms
/// while still letting the compiler vectorize the loop.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// A dense column vector.
#[derive(Clone, PartialEq, Default)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        check_finite(&data)?;
        Ok(Self(data))
    }

    /// Wraps `data` without the finiteness check. Arithmetic inside the crate
    /// uses this for values derived from already-validated inputs.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Self(data)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn basis(dim: usize, k: usize) -> Self {
        let mut v = Self::zeros(dim);
        v.0[k] = 1.0;
        v
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.0, &self.0)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn add(&self, other: &Vector) -> Vector {
        assert_eq!(self.dim(), other.dim(), "vector dimension mismatch");
        Vector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        assert_eq!(self.dim(), other.dim(), "vector dimension mismatch");
        Vector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn scale(&self, s: f64) -> Vector {
        Vector(self.0.iter().map(|a| a * s).collect())
    }

    pub fn max_abs_diff(&self, other: &Vector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Outer product `self * other^T`.
    pub fn outer(&self, other: &Vector) -> Matrix {
        let mut out = Matrix::zeros(self.dim(), other.dim());
        for i in 0..self.dim() {
            for j in 0..other.dim() {
                out[(i, j)] = self.0[i] * other.0[j];
            }
        }
        out
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

impl fmt::Debug for Vector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Vector{:?}", self.0)
    }
}

/// A dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch {
                expected: (rows, cols),
                got: (data.len(), 1),
            });
        }
        check_finite(&data)?;
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix without the finiteness check.
    ///
    /// Only for deliberately poisoned fixtures (e.g. NaN noise covariances
    /// that a component must never read).
    pub fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(LinalgError::DimensionMismatch {
                    expected: (r, c),
                    got: (r, row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(r, c, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diag(&vec![1.0; n])
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, d) in diag.iter().enumerate() {
            m[(i, i)] = *d;
        }
        m
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vector {
        Vector((0..self.rows).map(|i| self[(i, j)]).collect())
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diagonal().iter().sum()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                axpy(a, orow, out_row);
            }
        }
        out
    }

    /// `self * other^T` without materializing the transpose.
    pub fn matmul_t(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_t dimension mismatch");
        Matrix::from_fn(self.rows, other.rows, |i, j| dot(self.row(i), other.row(j)))
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vector {
        assert_eq!(self.cols, v.len(), "matrix-vector dimension mismatch");
        Vector((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `self^T * v`
    pub fn tr_mul_vec(&self, v: &[f64]) -> Vector {
        assert_eq!(self.rows, v.len(), "matrix-vector dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for (i, vi) in v.iter().enumerate() {
            axpy(*vi, self.row(i), &mut out);
        }
        Vector(out)
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "matrix add dimension mismatch");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "matrix sub dimension mismatch");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|a| a * s).collect(),
        }
    }

    /// `self += alpha * other`
    pub fn add_scaled_in_place(&mut self, alpha: f64, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "matrix add dimension mismatch");
        axpy(alpha, &other.data, &mut self.data);
    }

    /// `(self + self^T) / 2`
    pub fn symmetrize(&self) -> Matrix {
        assert!(self.is_square(), "symmetrize requires a square matrix");
        Matrix::from_fn(self.rows, self.cols, |i, j| {
            0.5 * (self[(i, j)] + self[(j, i)])
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "matrix dimension mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_symmetric(&self) -> Result<()> {
        if !self.is_square() {
            return Err(LinalgError::DimensionMismatch {
                expected: (self.rows, self.rows),
                got: self.shape(),
            });
        }
        let asymmetry = self.max_asymmetry();
        if asymmetry > SYMMETRY_TOL * self.max_abs().max(1.0) {
            return Err(LinalgError::NotSymmetric { asymmetry });
        }
        Ok(())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
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

/// Lower-triangular Cholesky factor `L` of an SPD matrix `P = L L^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdFactor {
    lower: Matrix,
}

impl SpdFactor {
    /// Validates and wraps a lower-triangular factor.
    pub fn from_lower(lower: Matrix) -> Result<Self> {
        if !lower.is_square() {
            return Err(LinalgError::DimensionMismatch {
                expected: (lower.rows(), lower.rows()),
                got: lower.shape(),
            });
        }
        check_finite(lower.as_slice())?;
        let n = lower.rows();
        for i in 0..n {
            let d = lower[(i, i)];
            if d <= 0.0 {
                return Err(LinalgError::NotPositiveDefinite { index: i, pivot: d });
            }
            for j in (i + 1)..n {
                if lower[(i, j)] != 0.0 {
                    return Err(LinalgError::InvalidArgument(format!(
                        "factor has nonzero upper entry at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self { lower })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            lower: Matrix::identity(n),
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.rows()
    }

    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    pub fn into_lower(self) -> Matrix {
        self.lower
    }

    /// `L L^T`
    pub fn reconstruct(&self) -> Matrix {
        self.lower.matmul_t(&self.lower)
    }

    /// Solves `L y = b` for each column of `b`.
    pub fn solve_lower(&self, b: &Matrix) -> Matrix {
        let n = self.dim();
        assert_eq!(b.rows(), n, "solve dimension mismatch");
        let l = &self.lower;
        let mut y = b.clone();
        for c in 0..b.cols() {
            for i in 0..n {
                let mut s = y[(i, c)];
                for k in 0..i {
                    s -= l[(i, k)] * y[(k, c)];
                }
                y[(i, c)] = s / l[(i, i)];
            }
        }
        y
    }

    /// Solves `L^T x = y` for each column of `y`.
    pub fn solve_upper(&self, y: &Matrix) -> Matrix {
        let n = self.dim();
        assert_eq!(y.rows(), n, "solve dimension mismatch");
        let l = &self.lower;
        let mut x = y.clone();
        for c in 0..y.cols() {
            for i in (0..n).rev() {
                let mut s = x[(i, c)];
                for k in (i + 1)..n {
                    s -= l[(k, i)] * x[(k, c)];
                }
                x[(i, c)] = s / l[(i, i)];
            }
        }
        x
    }

    /// Solves `L L^T X = B`.
    pub fn solve(&self, b: &Matrix) -> Matrix {
        self.solve_upper(&self.solve_lower(b))
    }

    pub fn solve_vec(&self, b: &[f64]) -> Vector {
        let bm = Matrix::from_vec_unchecked(b.len(), 1, b.to_vec());
        Vector::from_vec(self.solve(&bm).data)
    }
}

/// Cholesky factorization of a symmetric positive definite matrix.
///
/// The input is symmetrized as `(P + P^T) / 2` before factoring.
pub fn cholesky(p: &Matrix) -> Result<SpdFactor> {
    p.check_symmetric()?;
    let a = p.symmetrize();
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > PIVOT_FLOOR) {
            return Err(LinalgError::NotPositiveDefinite { index: j, pivot: d });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(SpdFactor { lower: l })
}

/// Reverse-mode derivative of [`cholesky`].
///
/// Given the gradient `lower_grad` of a scalar with respect to the factor `L`
/// (only the lower triangle is read), returns the symmetric gradient with
/// respect to the factored matrix.
pub fn cholesky_backward(factor: &SpdFactor, lower_grad: &Matrix) -> Matrix {
    let l = factor.lower();
    let n = l.rows();
    assert_eq!(lower_grad.shape(), (n, n), "cholesky_backward shape mismatch");
    let masked = Matrix::from_fn(n, n, |i, j| if j <= i { lower_grad[(i, j)] } else { 0.0 });
    // phi(L^T Lbar): lower triangle with halved diagonal
    let lt_lbar = l.transpose().matmul(&masked);
    let phi = Matrix::from_fn(n, n, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Greater => lt_lbar[(i, j)],
        std::cmp::Ordering::Equal => 0.5 * lt_lbar[(i, j)],
        std::cmp::Ordering::Less => 0.0,
    });
    // L^{-T} phi L^{-1}
    let left = factor.solve_upper(&phi);
    let full = factor.solve_upper(&left.transpose()).transpose();
    full.symmetrize()
}

/// Solves `P X = B` for SPD `P` through its Cholesky factor.
pub fn spd_solve(p: &Matrix, b: &Matrix) -> Result<Matrix> {
    if b.rows() != p.rows() {
        return Err(LinalgError::DimensionMismatch {
            expected: (p.rows(), b.cols()),
            got: b.shape(),
        });
    }
    Ok(cholesky(p)?.solve(b))
}

/// Eigendecomposition of a symmetric matrix, eigenvalues sorted descending.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricEigen {
    pub values: Vector,
    /// Column `k` is the eigenvector of `values[k]`.
    pub vectors: Matrix,
}

impl SymmetricEigen {
    /// `Q diag(values) Q^T`
    pub fn recompose(&self) -> Matrix {
        recompose(&self.vectors, &self.values)
    }
}

fn recompose(q: &Matrix, values: &[f64]) -> Matrix {
    let n = q.rows();
    let scaled = Matrix::from_fn(n, n, |i, k| q[(i, k)] * values[k]);
    scaled.matmul_t(q).symmetrize()
}

/// Cyclic Jacobi eigendecomposition for small symmetric matrices.
pub fn jacobi_eigen(p: &Matrix) -> Result<SymmetricEigen> {
    p.check_symmetric()?;
    let n = p.rows();
    let mut a = p.symmetrize();
    let mut v = Matrix::identity(n);
    let scale = a.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();

    let off_norm = |a: &Matrix| {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[(i, j)] * a[(i, j)];
                }
            }
        }
        s.sqrt()
    };

    let mut converged = n < 2 || off_norm(&a) <= OFF_DIAGONAL_TOL * scale;
    let mut sweep = 0;
    while !converged {
        if sweep == MAX_JACOBI_SWEEPS {
            return Err(LinalgError::NoConvergence { sweeps: sweep });
        }
        sweep += 1;
        for pi in 0..n {
            for qi in (pi + 1)..n {
                let apq = a[(pi, qi)];
                if apq == 0.0 {
                    continue;
                }
                let app = a[(pi, pi)];
                let aqq = a[(qi, qi)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, pi)];
                    let akq = a[(k, qi)];
                    a[(k, pi)] = c * akp - s * akq;
                    a[(k, qi)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(pi, k)];
                    let aqk = a[(qi, k)];
                    a[(pi, k)] = c * apk - s * aqk;
                    a[(qi, k)] = s * apk + c * aqk;
                }
                a[(pi, qi)] = 0.0;
                a[(qi, pi)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, pi)];
                    let vkq = v[(k, qi)];
                    v[(k, pi)] = c * vkp - s * vkq;
                    v[(k, qi)] = s * vkp + c * vkq;
                }
            }
        }
        converged = off_norm(&a) <= OFF_DIAGONAL_TOL * scale;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let values = Vector::from_vec(order.iter().map(|&k| a[(k, k)]).collect());
    let vectors = Matrix::from_fn(n, n, |i, k| v[(i, order[k])]);
    Ok(SymmetricEigen { values, vectors })
}

/// Rescales each eigenvalue of an SPD matrix by the matching multiplier.
///
/// `factors[k]` multiplies the k-th largest eigenvalue. Multipliers must be
/// finite and strictly positive so the result stays SPD.
pub fn spd_perturb(p: &Matrix, factors: &[f64]) -> Result<Matrix> {
    if factors.len() != p.rows() {
        return Err(LinalgError::DimensionMismatch {
            expected: (p.rows(), 1),
            got: (factors.len(), 1),
        });
    }
    if let Some(bad) = factors.iter().find(|f| !(f.is_finite() && **f > 0.0)) {
        return Err(LinalgError::InvalidArgument(format!(
            "eigenvalue multiplier {bad} is not positive"
        )));
    }
    let eig = jacobi_eigen(p)?;
    let scaled: Vec<f64> = eig.values.iter().zip(factors).map(|(l, f)| l * f).collect();
    Ok(recompose(&eig.vectors, &scaled))
}
