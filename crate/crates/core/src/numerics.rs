//! Small dense complex linear algebra.
//!
//! Everything the estimators need fits in matrices of at most a few dozen
//! rows and columns (the covariance is N×N with N ≤ 24, the rotation matrix
//! is K̂×K̂), plus tall least-squares systems and the M×M Cholesky factor used
//! to colour channel draws. The routines here favour robustness and
//! reproducibility over raw speed:
//!
//! * [`hermitian_evd`]: cyclic complex Jacobi.
//! * [`general_eigenvalues`]: Householder reduction to Hessenberg form
//!   followed by single-shift complex QR.
//! * [`ls_solve`]: Householder QR with a relative pivot check.
//! * [`cholesky`]: plain lower Cholesky for Hermitian positive definite input.

use std::ops::{Index, IndexMut, Mul};

use num_complex::Complex64;
use thiserror::Error;

/// Complex scalar used throughout the crate.
pub type C64 = Complex64;

const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_TOLERANCE: f64 = 1e-13;
const HERMITIAN_TOLERANCE: f64 = 1e-12;
const QR_MAX_ITERATIONS: usize = 500;
const RANK_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not Hermitian (relative asymmetry {asymmetry:.3e})")]
    NotHermitian { asymmetry: f64 },
    #[error("{routine} did not converge within {iterations} iterations")]
    NoConvergence {
        routine: &'static str,
        iterations: usize,
    },
    #[error("matrix is rank deficient (relative pivot {pivot:.3e})")]
    RankDeficient { pivot: f64 },
    #[error("matrix is not positive definite (pivot {pivot:.3e} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid matrix shape: {0}")]
    InvalidShape(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Dense complex matrix stored in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl ComplexMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![C64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = C64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(NumericsError::InvalidShape(format!(
                "{rows}x{cols} has an empty dimension"
            )));
        }
        if data.len() != rows * cols {
            return Err(NumericsError::InvalidShape(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m[(r, c)] = f(r, c);
            }
        }
        m
    }

    /// Builds a real diagonal matrix.
    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = C64::new(d, 0.0);
        }
        m
    }

    /// Matrix whose columns are the given vectors (all of equal length).
    pub fn from_columns(columns: &[Vec<C64>]) -> Result<Self> {
        let rows = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != rows) {
            return Err(NumericsError::InvalidShape(
                "columns have unequal lengths".into(),
            ));
        }
        let cols = columns.len();
        if rows == 0 || cols == 0 {
            return Err(NumericsError::InvalidShape("no columns".into()));
        }
        Ok(Self::from_fn(rows, cols, |r, c| columns[c][r]))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn column(&self, c: usize) -> Vec<C64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn row(&self, r: usize) -> &[C64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copies `count` consecutive rows starting at `start`.
    pub fn row_block(&self, start: usize, count: usize) -> Self {
        assert!(start + count <= self.rows && count > 0);
        Self {
            rows: count,
            cols: self.cols,
            data: self.data[start * self.cols..(start + count) * self.cols].to_vec(),
        }
    }

    /// Copies the first `count` columns.
    pub fn leading_columns(&self, count: usize) -> Self {
        assert!(count >= 1 && count <= self.cols);
        Self::from_fn(self.rows, count, |r, c| self[(r, c)])
    }

    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)].conj())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> C64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(NumericsError::DimensionMismatch(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(r, k)];
                if a == C64::new(0.0, 0.0) {
                    continue;
                }
                let rhs_row = rhs.row(k);
                let out_row = &mut out.data[r * rhs.cols..(r + 1) * rhs.cols];
                for (o, b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn mul_vec(&self, v: &[C64]) -> Result<Vec<C64>> {
        if v.len() != self.cols {
            return Err(NumericsError::DimensionMismatch(format!(
                "{}x{} times vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows)
            .map(|r| self.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(NumericsError::DimensionMismatch(format!(
                "{}x{} minus {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect(),
        })
    }

    /// ‖A − Aᴴ‖_F / ‖A‖_F (zero for the zero matrix).
    pub fn hermitian_asymmetry(&self) -> f64 {
        let norm = self.frobenius_norm();
        if norm == 0.0 {
            return 0.0;
        }
        let mut acc = 0.0;
        for r in 0..self.rows {
            for c in 0..self.cols {
                acc += (self[(r, c)] - self[(c, r)].conj()).norm_sqr();
            }
        }
        acc.sqrt() / norm
    }
}

impl Index<(usize, usize)> for ComplexMatrix {
    type Output = C64;

    fn index(&self, (r, c): (usize, usize)) -> &C64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for ComplexMatrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut C64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

impl Mul for &ComplexMatrix {
    type Output = ComplexMatrix;

    fn mul(self, rhs: &ComplexMatrix) -> ComplexMatrix {
        self.matmul(rhs).expect("matrix dimensions must agree")
    }
}

/// Eigen-decomposition of a Hermitian matrix.
#[derive(Debug, Clone)]
pub struct HermitianEvd {
    /// Sorted non-increasing.
    pub eigenvalues: Vec<f64>,
    /// Column `j` is the unit eigenvector for `eigenvalues[j]`.
    pub eigenvectors: ComplexMatrix,
}

impl HermitianEvd {
    /// Recomposes V Λ Vᴴ.
    pub fn reconstruct(&self) -> ComplexMatrix {
        let n = self.eigenvalues.len();
        let v = &self.eigenvectors;
        ComplexMatrix::from_fn(n, n, |r, c| {
            (0..n)
                .map(|j| v[(r, j)] * self.eigenvalues[j] * v[(c, j)].conj())
                .sum()
        })
    }
}

fn ensure_square(a: &ComplexMatrix) -> Result<usize> {
    if !a.is_square() {
        return Err(NumericsError::NotSquare {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    Ok(a.rows())
}

/// Eigenvalues and eigenvectors of a Hermitian matrix by cyclic Jacobi.
///
/// Eigenvalues come back sorted non-increasing (stable with respect to the
/// Jacobi output order for ties) and every eigenvector is normalised so its
/// first non-negligible entry is real and non-negative.
pub fn hermitian_evd(a: &ComplexMatrix) -> Result<HermitianEvd> {
    let n = ensure_square(a)?;
    let asymmetry = a.hermitian_asymmetry();
    if asymmetry > HERMITIAN_TOLERANCE {
        return Err(NumericsError::NotHermitian { asymmetry });
    }

    // Work on the exact Hermitian part.
    let mut w = ComplexMatrix::from_fn(n, n, |r, c| 0.5 * (a[(r, c)] + a[(c, r)].conj()));
    for i in 0..n {
        w[(i, i)] = C64::new(w[(i, i)].re, 0.0);
    }
    let mut v = ComplexMatrix::identity(n);
    let threshold = JACOBI_TOLERANCE * w.frobenius_norm();

    let off_norm = |m: &ComplexMatrix| -> f64 {
        let mut acc = 0.0;
        for r in 0..n {
            for c in 0..n {
                if r != c {
                    acc += m[(r, c)].norm_sqr();
                }
            }
        }
        acc.sqrt()
    };

    let mut converged = off_norm(&w) <= threshold;
    let mut sweeps = 0;
    while !converged {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(NumericsError::NoConvergence {
                routine: "Jacobi eigensolver",
                iterations: sweeps,
            });
        }
        sweeps += 1;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let g = w[(p, q)];
                let g_abs = g.norm();
                if g_abs == 0.0 {
                    continue;
                }
                let phase = g / g_abs;
                let app = w[(p, p)].re;
                let aqq = w[(q, q)].re;
                let tau = (aqq - app) / (2.0 * g_abs);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // Rotation G = diag(1, conj(phase)) · [[c, s], [-s, c]].
                let g_pp = C64::new(c, 0.0);
                let g_pq = C64::new(s, 0.0);
                let g_qp = -phase.conj() * s;
                let g_qq = phase.conj() * c;

                for k in 0..n {
                    let wkp = w[(k, p)];
                    let wkq = w[(k, q)];
                    w[(k, p)] = wkp * g_pp + wkq * g_qp;
                    w[(k, q)] = wkp * g_pq + wkq * g_qq;
                }
                for k in 0..n {
                    let wpk = w[(p, k)];
                    let wqk = w[(q, k)];
                    w[(p, k)] = g_pp.conj() * wpk + g_qp.conj() * wqk;
                    w[(q, k)] = g_pq.conj() * wpk + g_qq.conj() * wqk;
                }
                w[(p, q)] = C64::new(0.0, 0.0);
                w[(q, p)] = C64::new(0.0, 0.0);
                w[(p, p)] = C64::new(w[(p, p)].re, 0.0);
                w[(q, q)] = C64::new(w[(q, q)].re, 0.0);

                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = vkp * g_pp + vkq * g_qp;
                    v[(k, q)] = vkp * g_pq + vkq * g_qq;
                }
            }
        }
        converged = off_norm(&w) <= threshold;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| w[(j, j)].re.total_cmp(&w[(i, i)].re));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| w[(i, i)].re).collect();
    let mut eigenvectors = ComplexMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = v.column(src);
        let norm = col.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
        let pivot = col
            .iter()
            .copied()
            .find(|x| x.norm() > 1e-10 * norm)
            .unwrap_or(C64::new(1.0, 0.0));
        let rot = pivot.conj() / (pivot.norm() * norm);
        for x in col.iter_mut() {
            *x *= rot;
        }
        for (r, x) in col.into_iter().enumerate() {
            eigenvectors[(r, dst)] = x;
        }
    }
    Ok(HermitianEvd {
        eigenvalues,
        eigenvectors,
    })
}

/// Unit Householder vector `v` (with `v[0]` pivot) such that
/// (I − 2vvᴴ)x = αe₁. Returns `None` when `x` is zero.
fn householder(x: &[C64]) -> Option<(Vec<C64>, C64)> {
    let norm = x.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
    if norm == 0.0 {
        return None;
    }
    let phase = if x[0].norm() > 0.0 {
        x[0] / x[0].norm()
    } else {
        C64::new(1.0, 0.0)
    };
    let alpha = -phase * norm;
    let mut v = x.to_vec();
    v[0] -= alpha;
    let vnorm = v.iter().map(|e| e.norm_sqr()).sum::<f64>().sqrt();
    if vnorm == 0.0 {
        return None;
    }
    for e in v.iter_mut() {
        *e /= vnorm;
    }
    Some((v, alpha))
}

/// Eigenvalues of a general (small) complex matrix.
///
/// Returned sorted by complex argument ascending, arguments in (−π, π].
pub fn general_eigenvalues(a: &ComplexMatrix) -> Result<Vec<C64>> {
    let n = ensure_square(a)?;
    let mut h = a.clone();

    // Hessenberg reduction.
    for k in 0..n.saturating_sub(2) {
        let x: Vec<C64> = (k + 1..n).map(|r| h[(r, k)]).collect();
        let Some((v, _)) = householder(&x) else {
            continue;
        };
        // Left: rows k+1.., H ← (I − 2vvᴴ) H
        for c in 0..n {
            let dot: C64 = v
                .iter()
                .enumerate()
                .map(|(i, vi)| vi.conj() * h[(k + 1 + i, c)])
                .sum();
            for (i, vi) in v.iter().enumerate() {
                h[(k + 1 + i, c)] -= 2.0 * vi * dot;
            }
        }
        // Right: columns k+1.., H ← H (I − 2vvᴴ)
        for r in 0..n {
            let dot: C64 = v
                .iter()
                .enumerate()
                .map(|(i, vi)| h[(r, k + 1 + i)] * vi)
                .sum();
            for (i, vi) in v.iter().enumerate() {
                h[(r, k + 1 + i)] -= 2.0 * dot * vi.conj();
            }
        }
        for r in k + 2..n {
            h[(r, k)] = C64::new(0.0, 0.0);
        }
    }

    let mut eigs = vec![C64::new(0.0, 0.0); n];
    let mut hi = n - 1;
    let mut iterations = 0;
    let mut since_deflation = 0;
    loop {
        if hi == 0 {
            eigs[0] = h[(0, 0)];
            break;
        }
        let mut lo = hi;
        while lo > 0 {
            let sub = h[(lo, lo - 1)].norm();
            let scale = h[(lo - 1, lo - 1)].norm() + h[(lo, lo)].norm();
            let scale = if scale == 0.0 { 1.0 } else { scale };
            if sub <= f64::EPSILON * scale {
                h[(lo, lo - 1)] = C64::new(0.0, 0.0);
                break;
            }
            lo -= 1;
        }
        if lo == hi {
            eigs[hi] = h[(hi, hi)];
            hi -= 1;
            since_deflation = 0;
            continue;
        }
        iterations += 1;
        since_deflation += 1;
        if iterations > QR_MAX_ITERATIONS {
            return Err(NumericsError::NoConvergence {
                routine: "Hessenberg QR",
                iterations: QR_MAX_ITERATIONS,
            });
        }

        // The first sweep on a fresh block is unshifted, then Wilkinson
        // shifts, with an exceptional shift if progress stalls.
        let shift = if since_deflation == 1 {
            C64::new(0.0, 0.0)
        } else if since_deflation % 11 == 0 {
            h[(hi, hi)] + C64::new(0.75 * h[(hi, hi - 1)].norm(), 0.0)
        } else {
            let a = h[(hi - 1, hi - 1)];
            let b = h[(hi - 1, hi)];
            let c = h[(hi, hi - 1)];
            let d = h[(hi, hi)];
            let half = (a - d) * 0.5;
            let disc = (half * half + b * c).sqrt();
            let mu1 = (a + d) * 0.5 + disc;
            let mu2 = (a + d) * 0.5 - disc;
            if (mu1 - d).norm() < (mu2 - d).norm() {
                mu1
            } else {
                mu2
            }
        };

        for i in lo..=hi {
            h[(i, i)] -= shift;
        }
        let mut rotations = Vec::with_capacity(hi - lo);
        for k in lo..hi {
            let x = h[(k, k)];
            let y = h[(k + 1, k)];
            let nrm = (x.norm_sqr() + y.norm_sqr()).sqrt();
            let (c, s) = if nrm == 0.0 {
                (1.0, C64::new(0.0, 0.0))
            } else if x.norm() == 0.0 {
                (0.0, C64::new(1.0, 0.0))
            } else {
                (x.norm() / nrm, (x / x.norm()) * y.conj() / nrm)
            };
            for col in k..=hi {
                let top = h[(k, col)];
                let bot = h[(k + 1, col)];
                h[(k, col)] = c * top + s * bot;
                h[(k + 1, col)] = -s.conj() * top + c * bot;
            }
            rotations.push((c, s));
        }
        for (idx, &(c, s)) in rotations.iter().enumerate() {
            let k = lo + idx;
            let row_end = (k + 2).min(hi);
            for row in lo..=row_end {
                let left = h[(row, k)];
                let right = h[(row, k + 1)];
                h[(row, k)] = left * c + right * s.conj();
                h[(row, k + 1)] = -left * s + right * c;
            }
        }
        for i in lo..=hi {
            h[(i, i)] += shift;
        }
    }

    eigs.sort_by(|a, b| a.arg().total_cmp(&b.arg()));
    Ok(eigs)
}

/// Least-squares solution of A X = B via Householder QR.
///
/// `a` must have at least as many rows as columns and full column rank
/// (every |R_kk| above 1e-12 of the largest).
pub fn ls_solve(a: &ComplexMatrix, b: &ComplexMatrix) -> Result<ComplexMatrix> {
    let (m, n) = (a.rows(), a.cols());
    if b.rows() != m {
        return Err(NumericsError::DimensionMismatch(format!(
            "A has {m} rows, B has {}",
            b.rows()
        )));
    }
    if m < n {
        return Err(NumericsError::RankDeficient { pivot: 0.0 });
    }
    let mut r = a.clone();
    let mut qtb = b.clone();
    let nrhs = b.cols();
    for k in 0..n {
        let x: Vec<C64> = (k..m).map(|i| r[(i, k)]).collect();
        let Some((v, alpha)) = householder(&x) else {
            return Err(NumericsError::RankDeficient { pivot: 0.0 });
        };
        for c in k..n {
            let dot: C64 = v
                .iter()
                .enumerate()
                .map(|(i, vi)| vi.conj() * r[(k + i, c)])
                .sum();
            for (i, vi) in v.iter().enumerate() {
                r[(k + i, c)] -= 2.0 * vi * dot;
            }
        }
        r[(k, k)] = alpha;
        for i in k + 1..m {
            r[(i, k)] = C64::new(0.0, 0.0);
        }
        for c in 0..nrhs {
            let dot: C64 = v
                .iter()
                .enumerate()
                .map(|(i, vi)| vi.conj() * qtb[(k + i, c)])
                .sum();
            for (i, vi) in v.iter().enumerate() {
                qtb[(k + i, c)] -= 2.0 * vi * dot;
            }
        }
    }
    let max_pivot = (0..n).map(|k| r[(k, k)].norm()).fold(0.0, f64::max);
    for k in 0..n {
        let rel = if max_pivot > 0.0 {
            r[(k, k)].norm() / max_pivot
        } else {
            0.0
        };
        if rel <= RANK_TOLERANCE {
            return Err(NumericsError::RankDeficient { pivot: rel });
        }
    }
    let mut x = ComplexMatrix::zeros(n, nrhs);
    for c in 0..nrhs {
        for k in (0..n).rev() {
            let mut acc = qtb[(k, c)];
            for j in k + 1..n {
                acc -= r[(k, j)] * x[(j, c)];
            }
            x[(k, c)] = acc / r[(k, k)];
        }
    }
    Ok(x)
}

/// Lower Cholesky factor L with A = L Lᴴ.
pub fn cholesky(a: &ComplexMatrix) -> Result<ComplexMatrix> {
    let n = ensure_square(a)?;
    let mut l = ComplexMatrix::zeros(n, n);
    for j in 0..n {
        let mut diag = a[(j, j)].re;
        for k in 0..j {
            diag -= l[(j, k)].norm_sqr();
        }
        if !(diag > 0.0) {
            return Err(NumericsError::NotPositiveDefinite { row: j, pivot: diag });
        }
        let ljj = diag.sqrt();
        l[(j, j)] = C64::new(ljj, 0.0);
        for i in j + 1..n {
            let mut acc = a[(i, j)];
            for k in 0..j {
                acc -= l[(i, k)] * l[(j, k)].conj();
            }
            l[(i, j)] = acc / ljj;
        }
    }
    Ok(l)
}

/// Inner product xᴴy.
pub fn dot_conj(x: &[C64], y: &[C64]) -> C64 {
    x.iter().zip(y).map(|(a, b)| a.conj() * b).sum()
}

pub fn norm(x: &[C64]) -> f64 {
    x.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> ComplexMatrix {
        ComplexMatrix::from_fn(rows, cols, |_, _| {
            c(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
        })
    }

    fn random_hermitian(rng: &mut ChaCha8Rng, n: usize) -> ComplexMatrix {
        let b = random_matrix(rng, n, n);
        let a = &b * &b.adjoint();
        // b bᴴ is Hermitian up to rounding; symmetrise exactly.
        ComplexMatrix::from_fn(n, n, |r, col| 0.5 * (a[(r, col)] + a[(col, r)].conj()))
    }

    /// Laplace expansion, fine for n ≤ 4.
    fn det(a: &ComplexMatrix) -> C64 {
        let n = a.rows();
        if n == 1 {
            return a[(0, 0)];
        }
        let mut acc = c(0.0, 0.0);
        for j in 0..n {
            let minor = ComplexMatrix::from_fn(n - 1, n - 1, |r, col| {
                a[(r + 1, if col < j { col } else { col + 1 })]
            });
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            acc += sign * a[(0, j)] * det(&minor);
        }
        acc
    }

    #[test]
    fn evd_identity() {
        let evd = hermitian_evd(&ComplexMatrix::identity(4)).unwrap();
        assert_eq!(evd.eigenvalues, vec![1.0; 4]);
        let gram = &evd.eigenvectors.adjoint() * &evd.eigenvectors;
        assert!(gram.sub(&ComplexMatrix::identity(4)).unwrap().frobenius_norm() < 1e-12);
    }

    #[test]
    fn evd_real_diagonal() {
        let evd = hermitian_evd(&ComplexMatrix::from_diagonal(&[1.0, 3.0])).unwrap();
        assert_eq!(evd.eigenvalues, vec![3.0, 1.0]);
        assert!((evd.eigenvectors[(1, 0)] - c(1.0, 0.0)).norm() < 1e-15);
        assert!((evd.eigenvectors[(0, 1)] - c(1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn evd_rank_one_plus_identity() {
        // c(0.2) c(0.2)ᴴ + I, N = 8: spectrum {N + 1, 1, …, 1}.
        let n = 8;
        let v: Vec<C64> = (0..n)
            .map(|k| C64::from_polar(1.0, 2.0 * std::f64::consts::PI * 0.2 * k as f64))
            .collect();
        let a = ComplexMatrix::from_fn(n, n, |r, col| {
            v[r] * v[col].conj() + if r == col { c(1.0, 0.0) } else { c(0.0, 0.0) }
        });
        let evd = hermitian_evd(&a).unwrap();
        assert!((evd.eigenvalues[0] - 9.0).abs() < 1e-12);
        for &l in &evd.eigenvalues[1..] {
            assert!((l - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn evd_two_by_two_matches_characteristic_polynomial() {
        // λ² − (a + d)λ + (ad − |b|²) = 0
        let (a, d, b) = (2.5, -0.75, c(0.3, -1.2));
        let m = ComplexMatrix::from_vec(2, 2, vec![c(a, 0.0), b, b.conj(), c(d, 0.0)]).unwrap();
        let tr = a + d;
        let det = a * d - b.norm_sqr();
        let disc = (tr * tr - 4.0 * det).sqrt();
        let expected = [(tr + disc) / 2.0, (tr - disc) / 2.0];
        let evd = hermitian_evd(&m).unwrap();
        for (got, want) in evd.eigenvalues.iter().zip(expected) {
            assert!((got - want).abs() < 1e-13);
        }
    }

    #[test]
    fn evd_random_hermitian_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [2, 5, 12, 24] {
            let a = random_hermitian(&mut rng, n);
            let evd = hermitian_evd(&a).unwrap();
            let norm = a.frobenius_norm();
            let recon = evd.reconstruct().sub(&a).unwrap().frobenius_norm() / norm;
            assert!(recon < 1e-10, "n={n} reconstruction {recon}");
            let trace: f64 = evd.eigenvalues.iter().sum();
            assert!((trace - a.trace().re).abs() <= 1e-9 * a.trace().re.abs());
            assert!(evd.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
            let gram = &evd.eigenvectors.adjoint() * &evd.eigenvectors;
            assert!(gram.sub(&ComplexMatrix::identity(n)).unwrap().frobenius_norm() < 1e-9);
            for j in 0..n {
                let vj = evd.eigenvectors.column(j);
                let av = a.mul_vec(&vj).unwrap();
                let resid: f64 = av
                    .iter()
                    .zip(&vj)
                    .map(|(x, y)| (x - evd.eigenvalues[j] * y).norm_sqr())
                    .sum::<f64>()
                    .sqrt();
                assert!(resid <= 1e-9 * norm);
                let first = vj.iter().find(|x| x.norm() > 1e-10).unwrap();
                assert!(first.im.abs() < 1e-15 && first.re > 0.0);
            }
        }
    }

    #[test]
    fn evd_rejects_bad_input() {
        let rect = ComplexMatrix::zeros(2, 3);
        assert!(matches!(
            hermitian_evd(&rect),
            Err(NumericsError::NotSquare { .. })
        ));
        let mut m = ComplexMatrix::identity(2);
        m[(0, 1)] = c(0.5, 0.0);
        assert!(matches!(
            hermitian_evd(&m),
            Err(NumericsError::NotHermitian { .. })
        ));
    }

    #[test]
    fn general_eigenvalues_diagonal_and_rotation() {
        let d = ComplexMatrix::from_vec(
            2,
            2,
            vec![
                C64::from_polar(1.0, 1.1),
                c(0.0, 0.0),
                c(0.0, 0.0),
                C64::from_polar(1.0, 0.3),
            ],
        )
        .unwrap();
        let eigs = general_eigenvalues(&d).unwrap();
        assert!((eigs[0] - C64::from_polar(1.0, 0.3)).norm() < 1e-14);
        assert!((eigs[1] - C64::from_polar(1.0, 1.1)).norm() < 1e-14);

        let rot =
            ComplexMatrix::from_vec(2, 2, vec![c(0.0, 0.0), c(1.0, 0.0), c(-1.0, 0.0), c(0.0, 0.0)])
                .unwrap();
        let eigs = general_eigenvalues(&rot).unwrap();
        assert!((eigs[0] - c(0.0, -1.0)).norm() < 1e-12);
        assert!((eigs[1] - c(0.0, 1.0)).norm() < 1e-12);
    }

    /// Roots of the monic cubic x³ + a x² + b x + d by Durand–Kerner.
    fn cubic_roots(a: C64, b: C64, d: C64) -> [C64; 3] {
        let p = |x: C64| ((x + a) * x + b) * x + d;
        let mut r = [c(0.4, 0.9), c(0.4, 0.9).powu(2), c(0.4, 0.9).powu(3)];
        for _ in 0..500 {
            let prev = r;
            for i in 0..3 {
                let mut den = c(1.0, 0.0);
                for j in 0..3 {
                    if i != j {
                        den *= r[i] - r[j];
                    }
                }
                r[i] -= p(r[i]) / den;
            }
            if prev.iter().zip(&r).all(|(x, y)| (x - y).norm() < 1e-15) {
                break;
            }
        }
        r
    }

    #[test]
    fn general_eigenvalues_match_cubic_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let m = random_matrix(&mut rng, 3, 3);
            // Characteristic polynomial coefficients via trace identities.
            let tr = m.trace();
            let m2 = &m * &m;
            let tr2 = m2.trace();
            let det3 = det(&m);
            let a = -tr;
            let b = 0.5 * (tr * tr - tr2);
            let d = -det3;
            let roots = cubic_roots(a, b, d);
            let eigs = general_eigenvalues(&m).unwrap();
            for e in &eigs {
                let best = roots.iter().map(|r| (r - e).norm()).fold(f64::MAX, f64::min);
                assert!(best < 1e-8, "eigenvalue {e} not a root");
            }
            let product: C64 = eigs.iter().product();
            assert!((product - det3).norm() <= 1e-8 * det3.norm().max(1e-300));
        }
    }

    #[test]
    fn general_eigenvalues_product_equals_determinant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in 1..=4 {
            for _ in 0..10 {
                let m = random_matrix(&mut rng, n, n);
                let eigs = general_eigenvalues(&m).unwrap();
                let product: C64 = eigs.iter().product();
                let d = det(&m);
                assert!((product - d).norm() <= 1e-8 * d.norm(), "n={n}");
                let norm = m.frobenius_norm();
                for e in &eigs {
                    let shifted = ComplexMatrix::from_fn(n, n, |r, col| {
                        m[(r, col)] - if r == col { *e } else { c(0.0, 0.0) }
                    });
                    assert!(det(&shifted).norm() <= 1e-8 * norm.powi(n as i32));
                }
            }
        }
    }

    #[test]
    fn general_eigenvalues_sorted_by_argument() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_matrix(&mut rng, 7, 7);
        let eigs = general_eigenvalues(&m).unwrap();
        assert!(eigs.windows(2).all(|w| w[0].arg() <= w[1].arg()));
    }

    #[test]
    fn ls_identity_and_colinear() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random_matrix(&mut rng, 3, 2);
        let x = ls_solve(&ComplexMatrix::identity(3), &b).unwrap();
        assert!(x.sub(&b).unwrap().frobenius_norm() < 1e-14);

        let col = random_matrix(&mut rng, 5, 1);
        let x = ls_solve(&col, &col.scale(3.0)).unwrap();
        assert!((x[(0, 0)] - c(3.0, 0.0)).norm() < 1e-13);
    }

    #[test]
    fn ls_overdetermined_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_matrix(&mut rng, 4, 2);
        let b = random_matrix(&mut rng, 4, 1);
        let g = &a.adjoint() * &a;
        let rhs = &a.adjoint() * &b;
        // Explicit 2×2 inverse.
        let det = g[(0, 0)] * g[(1, 1)] - g[(0, 1)] * g[(1, 0)];
        let x0 = (g[(1, 1)] * rhs[(0, 0)] - g[(0, 1)] * rhs[(1, 0)]) / det;
        let x1 = (-g[(1, 0)] * rhs[(0, 0)] + g[(0, 0)] * rhs[(1, 0)]) / det;
        let x = ls_solve(&a, &b).unwrap();
        assert!((x[(0, 0)] - x0).norm() < 1e-12);
        assert!((x[(1, 0)] - x1).norm() < 1e-12);

        let resid = (&g * &x).sub(&rhs).unwrap().frobenius_norm() / rhs.frobenius_norm();
        assert!(resid < 1e-9);
    }

    #[test]
    fn ls_square_equals_direct_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_matrix(&mut rng, 5, 5);
        let x_true = random_matrix(&mut rng, 5, 2);
        let b = &a * &x_true;
        let x = ls_solve(&a, &b).unwrap();
        assert!(x.sub(&x_true).unwrap().frobenius_norm() < 1e-9 * x_true.frobenius_norm());
    }

    #[test]
    fn ls_rank_deficient_is_reported() {
        let col = vec![c(1.0, 0.0), c(2.0, 1.0), c(0.0, -1.0)];
        let a = ComplexMatrix::from_columns(&[col.clone(), col]).unwrap();
        let b = ComplexMatrix::zeros(3, 1);
        assert!(matches!(
            ls_solve(&a, &b),
            Err(NumericsError::RankDeficient { .. })
        ));
    }

    #[test]
    fn cholesky_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_hermitian(&mut rng, 6);
        let a = ComplexMatrix::from_fn(6, 6, |r, col| {
            a[(r, col)] + if r == col { c(0.1, 0.0) } else { c(0.0, 0.0) }
        });
        let l = cholesky(&a).unwrap();
        let recon = &l * &l.adjoint();
        assert!(recon.sub(&a).unwrap().frobenius_norm() < 1e-12 * a.frobenius_norm());
        assert!(cholesky(&ComplexMatrix::from_diagonal(&[1.0, -1.0])).is_err());
    }
}
