//! Small dense linear algebra: a row-major matrix type, column-stacking
//! `vec`/`unvec`, Kronecker matrix-vector products that never materialize the
//! Kronecker product, and a cyclic Jacobi eigensolver for symmetric PSD
//! Kronecker factors.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalues below this floor are clamped up to it.
pub const EIG_FLOOR: f64 = 1e-10;

const JACOBI_MAX_SWEEPS: usize = 64;
const JACOBI_TOL: f64 = 1e-15;

/// Dense matrix stored in row-major order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
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

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Mat {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims(
                "Mat::from_vec",
                format!("{} entries", rows * cols),
                format!("{} entries", data.len()),
            ));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::dims(
                    "Mat::from_rows",
                    format!("{cols} columns"),
                    format!("{} columns in row {i}", row.len()),
                ));
            }
            data.extend_from_slice(row);
        }
        Ok(Mat {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Mat::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
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

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diagonal().iter().sum()
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// `self · other`. Panics on inner-dimension mismatch.
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(
            self.cols, other.rows,
            "matmul: {}x{} times {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let other_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(other_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `selfᵀ · other` without forming the transpose.
    pub fn t_matmul(&self, other: &Mat) -> Mat {
        assert_eq!(
            self.rows, other.rows,
            "t_matmul: ({}x{})ᵀ times {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Mat::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let lhs = self.row(k);
            let rhs = other.row(k);
            for (i, &a) in lhs.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ` without forming the transpose.
    pub fn matmul_t(&self, other: &Mat) -> Mat {
        assert_eq!(
            self.cols, other.cols,
            "matmul_t: {}x{} times ({}x{})ᵀ",
            self.rows, self.cols, other.rows, other.cols
        );
        Mat::from_fn(self.rows, other.rows, |i, j| {
            self.row(i).iter().zip(other.row(j)).map(|(a, b)| a * b).sum()
        })
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(
            self.cols,
            x.len(),
            "matvec: {}x{} times {}",
            self.rows,
            self.cols,
            x.len()
        );
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        assert_eq!(self.shape(), other.shape(), "zip_map: shape mismatch");
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add(&self, other: &Mat) -> Mat {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Mat) -> Mat {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Mat {
        self.map(|v| v * s)
    }

    /// `self += s · other`
    pub fn axpy(&mut self, s: f64, other: &Mat) {
        assert_eq!(self.shape(), other.shape(), "axpy: shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn add_diag(&self, s: f64) -> Mat {
        let mut out = self.clone();
        for i in 0..self.rows.min(self.cols) {
            out[(i, i)] += s;
        }
        out
    }

    /// `(M + Mᵀ) / 2`
    pub fn symmetrize(&self) -> Mat {
        Mat::from_fn(self.rows, self.cols, |i, j| 0.5 * (self[(i, j)] + self[(j, i)]))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Mat {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Mat {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Appends a constant column (homogeneous coordinate).
    pub fn append_column(&self, value: f64) -> Mat {
        Mat::from_fn(self.rows, self.cols + 1, |i, j| {
            if j < self.cols {
                self[(i, j)]
            } else {
                value
            }
        })
    }

    /// Leading `rows` rows as a new matrix.
    pub fn top_rows(&self, rows: usize) -> Mat {
        Mat {
            rows,
            cols: self.cols,
            data: self.data[..rows * self.cols].to_vec(),
        }
    }

    pub fn outer(a: &[f64], b: &[f64]) -> Mat {
        Mat::from_fn(a.len(), b.len(), |i, j| a[i] * b[j])
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Column-stacking vectorization: `vec(M)[i + j·n] = M[i][j]`.
pub fn vec(m: &Mat) -> Vec<f64> {
    let n = m.rows();
    let mut out = vec![0.0; m.len()];
    for i in 0..n {
        for j in 0..m.cols() {
            out[i + j * n] = m[(i, j)];
        }
    }
    out
}

/// Inverse of [`vec`].
pub fn unvec(v: &[f64], rows: usize, cols: usize) -> Result<Mat> {
    if v.len() != rows * cols {
        return Err(Error::dims(
            "unvec",
            format!("{} entries for {rows}x{cols}", rows * cols),
            format!("{} entries", v.len()),
        ));
    }
    Ok(Mat::from_fn(rows, cols, |i, j| v[i + j * rows]))
}

/// `(B ⊗ A) x`, evaluated as `vec(A · unvec(x) · Bᵀ)`.
pub fn kron_matvec(b: &Mat, a: &Mat, x: &[f64]) -> Result<Vec<f64>> {
    if b.rows() != b.cols() || a.rows() != a.cols() {
        return Err(Error::dims(
            "kron_matvec",
            "square factors",
            format!("B {:?}, A {:?}", b.shape(), a.shape()),
        ));
    }
    let n = a.rows();
    let p = b.rows();
    if x.len() != n * p {
        return Err(Error::dims("kron_matvec", n * p, x.len()));
    }
    let xm = unvec(x, n, p)?;
    Ok(vec(&a.matmul(&xm).matmul_t(b)))
}

/// Symmetric eigendecomposition `M = Q diag(Λ) Qᵀ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymEig {
    /// Orthogonal basis; eigenvectors are columns.
    pub basis: Mat,
    /// Eigenvalues, sorted descending.
    pub eigvals: Vec<f64>,
}

impl SymEig {
    pub fn dim(&self) -> usize {
        self.eigvals.len()
    }

    /// Eigendecomposition of the identity.
    pub fn identity(n: usize) -> Self {
        SymEig {
            basis: Mat::identity(n),
            eigvals: vec![1.0; n],
        }
    }

    pub fn reconstruct(&self) -> Mat {
        let scaled = Mat::from_fn(self.dim(), self.dim(), |i, j| self.basis[(i, j)] * self.eigvals[j]);
        scaled.matmul_t(&self.basis)
    }

    /// `Q f(Λ) Qᵀ` for a spectral function `f`.
    pub fn spectral_map(&self, f: impl Fn(f64) -> f64) -> Mat {
        let d = self.dim();
        let fvals: Vec<f64> = self.eigvals.iter().map(|&l| f(l)).collect();
        let scaled = Mat::from_fn(d, d, |i, j| self.basis[(i, j)] * fvals[j]);
        scaled.matmul_t(&self.basis)
    }

    pub fn min_eigval(&self) -> f64 {
        self.eigvals.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Eigendecomposition with eigenvalues clamped from below at [`EIG_FLOOR`].
pub fn sym_eig(m: &Mat) -> Result<SymEig> {
    let mut eig = sym_eig_raw(m)?;
    for l in &mut eig.eigvals {
        if *l < EIG_FLOOR {
            *l = EIG_FLOOR;
        }
    }
    Ok(eig)
}

/// Eigendecomposition without clamping; eigenvalues may be negative.
///
/// The input is symmetrized first. Eigenvalues are sorted descending (ties
/// keep their original order) and each eigenvector is signed so that its
/// largest-magnitude entry is positive.
pub fn sym_eig_raw(m: &Mat) -> Result<SymEig> {
    if m.rows() != m.cols() {
        return Err(Error::dims("sym_eig", "square matrix", format!("{:?}", m.shape())));
    }
    m.ensure_finite("sym_eig input")?;
    let n = m.rows();
    let mut a = m.symmetrize();
    let mut v = Mat::identity(n);
    jacobi_diagonalize(&mut a, &mut v);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].partial_cmp(&a[(i, i)]).expect("finite eigenvalues"));

    let eigvals: Vec<f64> = order.iter().map(|&k| a[(k, k)]).collect();
    let mut basis = Mat::from_fn(n, n, |i, j| v[(i, order[j])]);
    for j in 0..n {
        let mut pivot = 0;
        for i in 1..n {
            if basis[(i, j)].abs() > basis[(pivot, j)].abs() {
                pivot = i;
            }
        }
        if basis[(pivot, j)] < 0.0 {
            for i in 0..n {
                basis[(i, j)] = -basis[(i, j)];
            }
        }
    }
    Ok(SymEig { basis, eigvals })
}

fn off_diagonal_norm(a: &Mat) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[(i, j)] * a[(i, j)];
            }
        }
    }
    s.sqrt()
}

// Cyclic Jacobi; `a` converges to diagonal, `v` accumulates the rotations.
fn jacobi_diagonalize(a: &mut Mat, v: &mut Mat) {
    let n = a.rows();
    let scale = a.frobenius_norm();
    if scale == 0.0 {
        return;
    }
    for _ in 0..JACOBI_MAX_SWEEPS {
        if off_diagonal_norm(a) <= JACOBI_TOL * scale {
            return;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    log::warn!(
        "jacobi eigensolver hit the sweep limit; residual off-diagonal {:e}",
        off_diagonal_norm(a)
    );
}

/// `Q_Aᵀ V Q_S`, i.e. `unvec((Q_S ⊗ Q_A)ᵀ vec(V))`.
pub fn project_to_eigenbasis(q_a: &Mat, q_s: &Mat, v: &Mat) -> Result<Mat> {
    check_basis_shapes("project_to_eigenbasis", q_a, q_s, v)?;
    Ok(q_a.t_matmul(v).matmul(q_s))
}

/// `Q_A C Q_Sᵀ`, the inverse of [`project_to_eigenbasis`].
pub fn project_from_eigenbasis(q_a: &Mat, q_s: &Mat, c: &Mat) -> Result<Mat> {
    check_basis_shapes("project_from_eigenbasis", q_a, q_s, c)?;
    Ok(q_a.matmul(c).matmul_t(q_s))
}

fn check_basis_shapes(op: &'static str, q_a: &Mat, q_s: &Mat, v: &Mat) -> Result<()> {
    if q_a.rows() != q_a.cols() || q_s.rows() != q_s.cols() || q_a.rows() != v.rows() || q_s.rows() != v.cols() {
        return Err(Error::dims(
            op,
            format!("Q_A {n}x{n}, Q_S {p}x{p}", n = v.rows(), p = v.cols()),
            format!("Q_A {:?}, Q_S {:?}", q_a.shape(), q_s.shape()),
        ));
    }
    Ok(())
}

/// Max-abs deviation of `QᵀQ` from the identity.
pub fn orthogonality_error(q: &Mat) -> f64 {
    q.t_matmul(q).max_abs_diff(&Mat::identity(q.cols()))
}
