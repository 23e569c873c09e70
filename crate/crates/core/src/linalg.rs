//! Small dense linear algebra over the index set of network inputs.
//!
//! Everything here is sized for |A| <= 8, so matrices are dense row-major
//! vectors and the spectral routines are cyclic Jacobi sweeps, which are
//! accurate to working precision at these sizes.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAX_SWEEPS: usize = 100;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(
    try_from = "Vec<Vec<T>>",
    into = "Vec<Vec<T>>",
    bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>")
)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> TryFrom<Vec<Vec<T>>> for Matrix<T> {
    type Error = Error;

    fn try_from(rows: Vec<Vec<T>>) -> Result<Self> {
        Matrix::from_rows(&rows)
    }
}

impl<T: Scalar> From<Matrix<T>> for Vec<Vec<T>> {
    fn from(m: Matrix<T>) -> Self {
        m.to_rows()
    }
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
    }

    /// The all-ones matrix.
    pub fn ones(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::one(); rows * cols] }
    }

    pub fn diag(values: &[T]) -> Self {
        let n = values.len();
        Self::from_fn(n, n, |i, j| if i == j { values[i] } else { T::zero() })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Ragged);
        }
        Ok(Self { rows: rows.len(), cols, data: rows.iter().flatten().copied().collect() })
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Ragged);
        }
        Ok(Self { rows, cols, data })
    }

    /// Column vector.
    pub fn column(values: &[T]) -> Self {
        Self { rows: values.len(), cols: 1, data: values.to_vec() }
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

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<T>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(self.mismatch("matmul", other));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] = out[(i, j)] + a * other[(k, j)];
                }
            }
        }
        Ok(out)
    }

    /// Matrix-vector product.
    pub fn apply(&self, v: &[T]) -> Result<Vec<T>> {
        if self.cols != v.len() {
            return Err(Error::DimensionMismatch {
                op: "apply",
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: v.len(),
                right_cols: 1,
            });
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(v).fold(T::zero(), |acc, (&a, &b)| acc + a * b))
            .collect())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc.max(x.abs()))
    }

    /// Largest |m_ij - m_ji|; zero for non-square input is meaningless, so callers check shape first.
    pub fn max_asymmetry(&self) -> T {
        let mut worst = T::zero();
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    pub fn trace(&self) -> T {
        (0..self.rows.min(self.cols)).fold(T::zero(), |acc, i| acc + self[(i, i)])
    }

    /// Elementwise cast to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| U::from(*x).expect("cast")).collect(),
        }
    }

    fn zip_with(&self, op: &'static str, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(self.mismatch(op, other));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    fn mismatch(&self, op: &'static str, other: &Self) -> Error {
        Error::DimensionMismatch {
            op,
            left_rows: self.rows,
            left_cols: self.cols,
            right_rows: other.rows,
            right_cols: other.cols,
        }
    }

    fn require_square(&self) -> Result<()> {
        if self.is_square() {
            Ok(())
        } else {
            Err(Error::NotSquare { rows: self.rows, cols: self.cols })
        }
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Frobenius inner product `sum_ab p_ab q_ab`.
pub fn frobenius_inner<T: Scalar>(p: &Matrix<T>, q: &Matrix<T>) -> Result<T> {
    if p.shape() != q.shape() {
        return Err(p.mismatch("frobenius_inner", q));
    }
    Ok(p.data.iter().zip(&q.data).fold(T::zero(), |acc, (&a, &b)| acc + a * b))
}

fn symmetry_tolerance<T: Scalar>(m: &Matrix<T>) -> T {
    let base = T::lit(1e-12).max(T::epsilon() * T::lit(16.0));
    base * (T::one() + m.frobenius_norm())
}

fn psd_floor<T: Scalar>(m: &Matrix<T>) -> T {
    let base = T::lit(1e-10).max(T::epsilon() * T::lit(16.0));
    -(base * (T::one() + m.frobenius_norm()))
}

/// Exactly symmetric square matrix (the dual variables live here).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(
    try_from = "Matrix<T>",
    into = "Matrix<T>",
    bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>")
)]
pub struct SymMatrix<T>(Matrix<T>);

impl<T: Scalar> TryFrom<Matrix<T>> for SymMatrix<T> {
    type Error = Error;

    fn try_from(m: Matrix<T>) -> Result<Self> {
        SymMatrix::new(m)
    }
}

impl<T: Scalar> From<SymMatrix<T>> for Matrix<T> {
    fn from(s: SymMatrix<T>) -> Self {
        s.0
    }
}

impl<T: Scalar> SymMatrix<T> {
    /// Accepts a matrix that is symmetric up to rounding and stores its exact symmetrization.
    pub fn new(m: Matrix<T>) -> Result<Self> {
        m.require_square()?;
        let asym = m.max_asymmetry();
        if asym > symmetry_tolerance(&m) {
            return Err(Error::NotSymmetric { max_asymmetry: asym.to_f64().unwrap_or(f64::NAN) });
        }
        Ok(Self::symmetrize(&m))
    }

    /// `(m + m^T) / 2`, no tolerance check.
    pub fn symmetrize(m: &Matrix<T>) -> Self {
        let half = T::lit(0.5);
        let n = m.rows;
        Self(Matrix::from_fn(n, n, |i, j| {
            if i == j {
                m[(i, i)]
            } else {
                (m[(i, j)] + m[(j, i)]) * half
            }
        }))
    }

    pub fn zeros(n: usize) -> Self {
        Self(Matrix::zeros(n, n))
    }

    pub fn scalar(value: T) -> Self {
        Self(Matrix::from_fn(1, 1, |_, _| value))
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    /// Builds from the upper triangle `(0,0), (0,1), .., (0,n-1), (1,1), ..`.
    pub fn from_upper(n: usize, upper: &[T]) -> Result<Self> {
        if upper.len() != n * (n + 1) / 2 {
            return Err(Error::Ragged);
        }
        let mut m = Matrix::zeros(n, n);
        let mut k = 0;
        for i in 0..n {
            for j in i..n {
                m[(i, j)] = upper[k];
                m[(j, i)] = upper[k];
                k += 1;
            }
        }
        Ok(Self(m))
    }

    pub fn upper(&self) -> Vec<T> {
        let n = self.dim();
        let mut out = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            for j in i..n {
                out.push(self.0[(i, j)]);
            }
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.0.rows
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix<T> {
        self.0
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.0[(i, j)]
    }

    pub fn frobenius_norm(&self) -> T {
        self.0.frobenius_norm()
    }

    pub fn scale(&self, s: T) -> Self {
        Self(self.0.scale(s))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        Ok(Self(self.0.add(&other.0)?))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        Ok(Self(self.0.sub(&other.0)?))
    }

    pub fn is_zero(&self) -> bool {
        self.0.data.iter().all(|x| x.is_zero())
    }

    pub fn eigen(&self) -> SymEigen<T> {
        symmetric_eigen(&self.0)
    }
}

/// Symmetric positive semidefinite matrix: covariances and Gram kernels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(
    try_from = "Matrix<T>",
    into = "Matrix<T>",
    bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>")
)]
pub struct PsdMatrix<T>(SymMatrix<T>);

impl<T: Scalar> TryFrom<Matrix<T>> for PsdMatrix<T> {
    type Error = Error;

    fn try_from(m: Matrix<T>) -> Result<Self> {
        PsdMatrix::new(m)
    }
}

impl<T: Scalar> From<PsdMatrix<T>> for Matrix<T> {
    fn from(p: PsdMatrix<T>) -> Self {
        p.0 .0
    }
}

impl<T: Scalar> PsdMatrix<T> {
    /// Admits `m` if it is symmetric and its smallest eigenvalue is at least
    /// `-1e-10 * (1 + |m|_F)`.
    pub fn new(m: Matrix<T>) -> Result<Self> {
        Self::from_sym(SymMatrix::new(m)?)
    }

    pub fn from_sym(s: SymMatrix<T>) -> Result<Self> {
        let floor = psd_floor(&s.0);
        let min = s.eigen().values.first().copied().unwrap_or(T::zero());
        if min < floor {
            return Err(Error::NotPsd {
                min_eigenvalue: min.to_f64().unwrap_or(f64::NAN),
                floor: floor.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(Self(s))
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    pub fn zeros(n: usize) -> Self {
        Self(SymMatrix::zeros(n))
    }

    pub fn identity(n: usize) -> Self {
        Self(SymMatrix(Matrix::identity(n)))
    }

    pub fn scalar(value: T) -> Result<Self> {
        Self::from_sym(SymMatrix::scalar(value))
    }

    pub fn diag(values: &[T]) -> Result<Self> {
        Self::new(Matrix::diag(values))
    }

    /// `b b^T`, which is PSD by construction.
    pub fn gram(b: &Matrix<T>) -> Self {
        let n = b.rows;
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = b.row(i).iter().zip(b.row(j)).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Self(SymMatrix(m))
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }

    pub fn sym(&self) -> &SymMatrix<T> {
        &self.0
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.0 .0
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.0.get(i, j)
    }

    pub fn frobenius_norm(&self) -> T {
        self.0.frobenius_norm()
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }

    /// Unique symmetric PSD square root.
    pub fn root(&self) -> Self {
        matrix_root(self)
    }

    pub fn cast<U: Scalar>(&self) -> PsdMatrix<U> {
        PsdMatrix(SymMatrix(self.0 .0.cast()))
    }
}

/// Eigen-decomposition of a symmetric matrix: ascending `values`, eigenvectors in the columns of `vectors`.
#[derive(Clone, Debug)]
pub struct SymEigen<T> {
    pub values: Vec<T>,
    pub vectors: Matrix<T>,
}

impl<T: Scalar> SymEigen<T> {
    /// `V f(D) V^T`.
    pub fn reconstruct(&self, f: impl Fn(T) -> T) -> Matrix<T> {
        let n = self.values.len();
        let fv: Vec<T> = self.values.iter().map(|&x| f(x)).collect();
        let v = &self.vectors;
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let s = (0..n).fold(T::zero(), |acc, k| acc + v[(i, k)] * fv[k] * v[(j, k)]);
                out[(i, j)] = s;
                out[(j, i)] = s;
            }
        }
        out
    }
}

/// Cyclic Jacobi eigen-decomposition. Only the symmetric part of `m` is used.
pub fn symmetric_eigen<T: Scalar>(m: &Matrix<T>) -> SymEigen<T> {
    let n = m.rows;
    let mut a = SymMatrix::symmetrize(m).0;
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_norm();
    if scale > T::zero() {
        for _ in 0..MAX_SWEEPS {
            let mut off = T::zero();
            for p in 0..n {
                for q in (p + 1)..n {
                    off = off + a[(p, q)] * a[(p, q)];
                }
            }
            if off.sqrt() <= T::epsilon() * T::lit(1e-2) * scale {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a[(p, q)];
                    if apq.abs() <= T::min_positive_value() {
                        continue;
                    }
                    let theta = (a[(q, q)] - a[(p, p)]) / (T::lit(2.0) * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                    let c = T::one() / (t * t + T::one()).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[(k, p)], a[(k, q)]);
                        a[(k, p)] = c * akp - s * akq;
                        a[(k, q)] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                        a[(p, k)] = c * apk - s * aqk;
                        a[(q, k)] = s * apk + c * aqk;
                    }
                    for k in 0..n {
                        let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                        v[(k, p)] = c * vkp - s * vkq;
                        v[(k, q)] = s * vkp + c * vkq;
                    }
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].partial_cmp(&a[(j, j)]).unwrap_or(std::cmp::Ordering::Equal));
    SymEigen {
        values: order.iter().map(|&i| a[(i, i)]).collect(),
        vectors: Matrix::from_fn(n, n, |i, j| v[(i, order[j])]),
    }
}

/// Thin singular value decomposition `m = U diag(s) V^T` by one-sided Jacobi.
#[derive(Clone, Debug)]
pub struct Svd<T> {
    pub u: Matrix<T>,
    pub singular_values: Vec<T>,
    pub v: Matrix<T>,
}

pub fn svd<T: Scalar>(m: &Matrix<T>) -> Svd<T> {
    if m.rows < m.cols {
        let t = svd(&m.transpose());
        return Svd { u: t.v, singular_values: t.singular_values, v: t.u };
    }
    let (rows, cols) = m.shape();
    let mut u = m.clone();
    let mut v = Matrix::identity(cols);
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let (mut alpha, mut beta, mut gamma) = (T::zero(), T::zero(), T::zero());
                for k in 0..rows {
                    let (x, y) = (u[(k, p)], u[(k, q)]);
                    alpha = alpha + x * x;
                    beta = beta + y * y;
                    gamma = gamma + x * y;
                }
                if gamma.abs() <= T::epsilon() * (alpha * beta).sqrt() || gamma.is_zero() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::lit(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                for k in 0..rows {
                    let (x, y) = (u[(k, p)], u[(k, q)]);
                    u[(k, p)] = c * x - s * y;
                    u[(k, q)] = s * x + c * y;
                }
                for k in 0..cols {
                    let (x, y) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * x - s * y;
                    v[(k, q)] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut singular_values = Vec::with_capacity(cols);
    for j in 0..cols {
        let norm = (0..rows).fold(T::zero(), |acc, k| acc + u[(k, j)] * u[(k, j)]).sqrt();
        singular_values.push(norm);
        if norm > T::zero() {
            for k in 0..rows {
                u[(k, j)] = u[(k, j)] / norm;
            }
        }
    }
    Svd { u, singular_values, v }
}

/// Unique symmetric PSD root, negative eigenvalues clipped to zero.
pub fn matrix_root<T: Scalar>(q: &PsdMatrix<T>) -> PsdMatrix<T> {
    let eig = q.sym().eigen();
    // eigenvalues at rounding level are treated as exact zeros, so that the root of a
    // rank-deficient matrix stays rank-deficient
    let top = eig.values.iter().fold(T::zero(), |m, &x| m.max(x.abs()));
    let floor = top * T::epsilon() * T::lit(16.0 * q.dim().max(1) as f64);
    let root = eig.reconstruct(|x| if x <= floor { T::zero() } else { x.sqrt() });
    PsdMatrix(SymMatrix(root))
}

/// Relative singular-value cutoff below which directions count as null.
pub fn pinv_cutoff<T: Scalar>(rows: usize, cols: usize) -> T {
    T::lit(1e-12).max(T::epsilon() * T::from_usize(rows.max(cols)).unwrap_or(T::one()))
}

/// Moore-Penrose pseudoinverse.
pub fn pseudo_inverse<T: Scalar>(g: &Matrix<T>) -> Matrix<T> {
    let (rows, cols) = g.shape();
    let Svd { u, singular_values, v } = svd(g);
    let smax = singular_values.iter().fold(T::zero(), |acc, &s| acc.max(s));
    let cutoff = smax * pinv_cutoff::<T>(rows, cols);
    let mut out = Matrix::zeros(cols, rows);
    if smax.is_zero() {
        return out;
    }
    for (k, &s) in singular_values.iter().enumerate() {
        if s <= cutoff {
            continue;
        }
        let inv = T::one() / s;
        for i in 0..cols {
            let vik = v[(i, k)] * inv;
            if vik.is_zero() {
                continue;
            }
            for j in 0..rows {
                out[(i, j)] = out[(i, j)] + vik * u[(j, k)];
            }
        }
    }
    out
}

/// Whether the columns of `z` lie in the range of `g`: `|(I - g g^+) z|_F <= tol (1 + |z|_F)`.
pub fn range_contains<T: Scalar>(g: &Matrix<T>, z: &Matrix<T>, tol: T) -> Result<bool> {
    if g.rows != z.rows {
        return Err(g.mismatch("range_contains", z));
    }
    let projected = g.matmul(&pseudo_inverse(g))?.matmul(z)?;
    let residual = z.sub(&projected)?.frobenius_norm();
    Ok(residual <= tol * (T::one() + z.frobenius_norm()))
}
