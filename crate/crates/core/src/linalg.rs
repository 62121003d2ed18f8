//! Dense symmetric linear algebra.
//!
//! Everything here works on small row-major matrices (a few hundred rows at
//! most). The symmetric eigensolver is a cyclic Jacobi method with a fixed
//! row-cyclic sweep order, so results are bit-stable for a given build.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
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
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Contract(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Contract("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Contract(format!(
                "matmul shape mismatch {}x{} · {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`, without materializing the transpose.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Contract(format!(
                "matmul_t shape mismatch {}x{} · ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::Contract(format!(
                "t_matmul shape mismatch ({}x{})ᵀ · {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let a_row = self.row(r);
            let b_row = other.row(r);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// First `k` columns as a new `rows × k` matrix.
    pub fn leading_columns(&self, k: usize) -> Matrix {
        let mut out = Matrix::zeros(self.rows, k);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[..k]);
        }
        out
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A sliding window of activations: one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    matrix: Matrix,
}

impl Window {
    pub fn new(matrix: Matrix) -> Result<Self> {
        if matrix.rows < 2 || matrix.cols < 2 {
            return Err(Error::Contract(format!(
                "window must be at least 2x2, got {}x{}",
                matrix.rows, matrix.cols
            )));
        }
        if !matrix.is_finite() {
            return Err(Error::Contract("window contains non-finite entries".into()));
        }
        Ok(Self { matrix })
    }

    pub fn from_rows<'a, I>(rows: I, dim: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut data = Vec::new();
        let mut n = 0;
        for r in rows {
            if r.len() != dim {
                return Err(Error::Contract(format!(
                    "row {n} has dimension {}, expected {dim}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
            n += 1;
        }
        Self::new(Matrix::from_vec(n, dim, data)?)
    }

    pub fn rows(&self) -> usize {
        self.matrix.rows
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols
    }

    /// Aspect ratio c = d / N.
    pub fn aspect(&self) -> f64 {
        self.dim() as f64 / self.rows() as f64
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }
}

/// Which side of the data matrix a second-moment matrix was built on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CovarianceForm {
    /// `(1/N) XᵀX`, d × d.
    Covariance,
    /// `(1/N) XXᵀ`, N × N; same nonzero spectrum as the covariance.
    Gram,
}

#[derive(Debug, Clone)]
pub struct WindowCovariance {
    pub matrix: Matrix,
    pub form: CovarianceForm,
    pub rows: usize,
    pub dim: usize,
}

/// Second-moment matrix of a window.
///
/// Uses the d × d covariance when d ≤ N and the N × N Gram matrix otherwise.
/// With `centered` the columns are mean-centered first.
pub fn window_covariance(window: &Window, centered: bool) -> Result<WindowCovariance> {
    let x = window.matrix();
    if !x.is_finite() {
        return Err(Error::Contract("window contains non-finite entries".into()));
    }
    let (n, d) = (x.rows, x.cols);
    let centered_storage;
    let x = if centered {
        let mut c = x.clone();
        for j in 0..d {
            let mean = (0..n).map(|i| c.get(i, j)).sum::<f64>() / n as f64;
            for i in 0..n {
                let v = c.get(i, j) - mean;
                c.set(i, j, v);
            }
        }
        centered_storage = c;
        &centered_storage
    } else {
        x
    };
    let inv_n = 1.0 / n as f64;
    let (mut matrix, form) = if d <= n {
        (x.t_matmul(x)?, CovarianceForm::Covariance)
    } else {
        (x.matmul_t(x)?, CovarianceForm::Gram)
    };
    matrix.scale(inv_n);
    symmetrize(&mut matrix);
    Ok(WindowCovariance {
        matrix,
        form,
        rows: n,
        dim: d,
    })
}

fn symmetrize(m: &mut Matrix) {
    let n = m.rows;
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m.get(i, j) + m.get(j, i));
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
}

/// Eigen-decomposition result.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    /// Sorted descending.
    pub eigenvalues: Vec<f64>,
    /// Column `i` pairs with `eigenvalues[i]`.
    pub eigenvectors: Option<Matrix>,
    /// c = d / N of the originating window (1.0 for a bare matrix).
    pub aspect: f64,
}

const JACOBI_MAX_SWEEPS: usize = 64;
const JACOBI_REL_TOL: f64 = 1e-12;

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Sweeps visit (p, q) pairs row by row. Iteration stops once the
/// off-diagonal Frobenius norm falls below `1e-12 · ‖A‖_F`. Eigenvalues are
/// returned in descending order; each eigenvector is signed so that its
/// largest-magnitude component (first on ties) is positive.
pub fn sym_eig(matrix: &Matrix, need_vectors: bool) -> Result<Spectrum> {
    let m = matrix.rows;
    if matrix.cols != m {
        return Err(Error::Contract(format!(
            "sym_eig needs a square matrix, got {}x{}",
            matrix.rows, matrix.cols
        )));
    }
    if !matrix.is_finite() {
        return Err(Error::Contract("sym_eig input has non-finite entries".into()));
    }
    let norm = matrix.frobenius_norm();
    for i in 0..m {
        for j in (i + 1)..m {
            let (a, b) = (matrix.get(i, j), matrix.get(j, i));
            if (a - b).abs() > 1e-9 * norm.max(1.0) {
                return Err(Error::Contract(format!(
                    "matrix not symmetric at ({i},{j}): {a} vs {b}"
                )));
            }
        }
    }

    let mut a = matrix.clone();
    symmetrize(&mut a);
    let mut v = need_vectors.then(|| Matrix::identity(m));
    let tol = JACOBI_REL_TOL * norm;

    let mut converged = off_diagonal_norm(&a) <= tol;
    let mut sweeps = 0;
    while !converged {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::Numerical(format!(
                "Jacobi did not converge after {sweeps} sweeps (off-diagonal norm {:.3e})",
                off_diagonal_norm(&a)
            )));
        }
        for p in 0..m {
            for q in (p + 1)..m {
                rotate(&mut a, v.as_mut(), p, q);
            }
        }
        sweeps += 1;
        converged = off_diagonal_norm(&a) <= tol;
    }

    let mut order: Vec<usize> = (0..m).collect();
    let diag: Vec<f64> = (0..m).map(|i| a.get(i, i)).collect();
    order.sort_by(|&i, &j| diag[j].total_cmp(&diag[i]).then(i.cmp(&j)));
    let eigenvalues = order.iter().map(|&i| diag[i]).collect();
    let eigenvectors = v.map(|v| {
        let mut sorted = Matrix::zeros(m, m);
        for (new_col, &old_col) in order.iter().enumerate() {
            let col = v.column(old_col);
            let mut pivot = 0;
            for (i, x) in col.iter().enumerate() {
                if x.abs() > col[pivot].abs() {
                    pivot = i;
                }
            }
            let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
            for (r, x) in col.iter().enumerate() {
                sorted.set(r, new_col, sign * x);
            }
        }
        sorted
    });
    Ok(Spectrum {
        eigenvalues,
        eigenvectors,
        aspect: 1.0,
    })
}

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.rows;
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a.get(i, j).powi(2);
            }
        }
    }
    s.sqrt()
}

/// One Jacobi rotation annihilating `a[p][q]` (Rutishauser's stable form).
fn rotate(a: &mut Matrix, v: Option<&mut Matrix>, p: usize, q: usize) {
    let apq = a.get(p, q);
    if apq == 0.0 {
        return;
    }
    let n = a.rows;
    let app = a.get(p, p);
    let aqq = a.get(q, q);
    let theta = (aqq - app) / (2.0 * apq);
    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
    // signum(0.0) is 1.0, which gives the 45° rotation for equal diagonals.
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;

    for k in 0..n {
        let akp = a.get(k, p);
        let akq = a.get(k, q);
        a.set(k, p, c * akp - s * akq);
        a.set(k, q, s * akp + c * akq);
    }
    for k in 0..n {
        let apk = a.get(p, k);
        let aqk = a.get(q, k);
        a.set(p, k, c * apk - s * aqk);
        a.set(q, k, s * apk + c * aqk);
    }
    a.set(p, q, 0.0);
    a.set(q, p, 0.0);

    if let Some(v) = v {
        for k in 0..n {
            let vkp = v.get(k, p);
            let vkq = v.get(k, q);
            v.set(k, p, c * vkp - s * vkq);
            v.set(k, q, s * vkp + c * vkq);
        }
    }
}

/// Eigenvalues of a window's second-moment matrix, always `d` of them.
///
/// For Gram-form windows the `d − N` structural zeros are appended. Values
/// whose magnitude is below `1e-12 · λ_max` (rounding residue of a PSD
/// matrix) are snapped to exactly zero.
pub fn window_spectrum(window: &Window, centered: bool, need_vectors: bool) -> Result<Spectrum> {
    let cov = window_covariance(window, centered)?;
    let need_vectors = need_vectors && cov.form == CovarianceForm::Covariance;
    let mut spec = sym_eig(&cov.matrix, need_vectors)?;
    spec.eigenvalues.resize(cov.dim, 0.0);
    clamp_psd(&mut spec.eigenvalues);
    spec.aspect = window.aspect();
    Ok(spec)
}

pub(crate) fn clamp_psd(eigenvalues: &mut [f64]) {
    let top = eigenvalues.iter().copied().fold(0.0, f64::max);
    let floor = 1e-12 * top;
    for v in eigenvalues.iter_mut() {
        if *v <= floor {
            *v = 0.0;
        }
    }
}

/// Checks that the columns of `basis` are orthonormal within `tol`.
pub fn check_orthonormal_columns(basis: &Matrix, tol: f64) -> Result<()> {
    let gram = basis.t_matmul(basis)?;
    let err = gram.max_abs_diff(&Matrix::identity(basis.cols));
    if err > tol {
        return Err(Error::Contract(format!(
            "basis columns not orthonormal (max |VᵀV − I| = {err:.3e})"
        )));
    }
    Ok(())
}

/// `matrix · basis` for an orthonormal `d × k` basis.
pub fn project_columns(matrix: &Matrix, basis: &Matrix) -> Result<Matrix> {
    if basis.rows != matrix.cols || basis.cols > basis.rows {
        return Err(Error::Contract(format!(
            "basis must be {}×k with k ≤ {}, got {}×{}",
            matrix.cols, matrix.cols, basis.rows, basis.cols
        )));
    }
    check_orthonormal_columns(basis, 1e-8)?;
    matrix.matmul(basis)
}
