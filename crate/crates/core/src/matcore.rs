//! Symmetric matrices and PSD-cone utilities.
//!
//! Every PSD predicate in the crate goes through a symmetric
//! eigendecomposition; [`SymMatrix`] keeps its entries exactly symmetric so
//! the predicates never see a skew part.

use std::fmt;
use std::ops::{Add, Mul, Sub};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

/// Default tolerance for PSD predicates.
pub const PSD_TOL: f64 = 1e-10;

/// Relative cutoff below which a Gram–Schmidt residual is treated as dependent.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatError {
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("dimension must be at least 1")]
    EmptyDimension,
    #[error("matrix is not positive definite (min eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("probabilities sum to {sum}, expected 1")]
    ProbabilitySum { sum: f64 },
    #[error("negative probability {0}")]
    NegativeProbability(f64),
    #[error("empty sample or sequence")]
    Empty,
    #[error("sequence is not PSD-monotone at index {index} (min eigenvalue of increment {min_eigenvalue:e})")]
    MonotonicityViolation { index: usize, min_eigenvalue: f64 },
}

/// Dense symmetric `d x d` matrix.
///
/// The upper triangle is authoritative: constructors mirror it onto the
/// lower triangle, so `m[(i, j)] == m[(j, i)]` holds bit for bit.
#[derive(Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl fmt::Debug for SymMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SymMatrix{:?}", self.to_rows())
    }
}

impl SymMatrix {
    /// Builds a symmetric matrix from the upper triangle of `m`.
    pub fn from_upper(mut m: DMatrix<f64>) -> Result<Self, MatError> {
        let (rows, cols) = m.shape();
        if rows != cols {
            return Err(MatError::NotSquare { rows, cols });
        }
        if rows == 0 {
            return Err(MatError::EmptyDimension);
        }
        for i in 0..rows {
            for j in 0..i {
                m[(i, j)] = m[(j, i)];
            }
        }
        Ok(SymMatrix(m))
    }

    /// Symmetric part `(m + mᵀ)/2` of a square matrix.
    pub fn symmetrize(m: &DMatrix<f64>) -> Self {
        let d = m.nrows();
        assert_eq!(d, m.ncols(), "symmetrize needs a square matrix");
        let mut out = DMatrix::zeros(d, d);
        for i in 0..d {
            out[(i, i)] = m[(i, i)];
            for j in (i + 1)..d {
                let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        SymMatrix(out)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MatError> {
        let d = rows.len();
        if d == 0 {
            return Err(MatError::EmptyDimension);
        }
        for r in rows {
            if r.len() != d {
                return Err(MatError::NotSquare {
                    rows: d,
                    cols: r.len(),
                });
            }
        }
        Self::from_upper(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
    }

    pub fn zeros(d: usize) -> Self {
        SymMatrix(DMatrix::zeros(d, d))
    }

    pub fn identity(d: usize) -> Self {
        SymMatrix(DMatrix::identity(d, d))
    }

    pub fn scalar(d: usize, v: f64) -> Self {
        SymMatrix(DMatrix::identity(d, d) * v)
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        SymMatrix(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim())
            .map(|i| (0..self.dim()).map(|j| self.0[(i, j)]).collect())
            .collect()
    }

    /// Row-major upper triangle, the layout used by the CSV writers.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let d = self.dim();
        let mut out = Vec::with_capacity(d * (d + 1) / 2);
        for i in 0..d {
            for j in i..d {
                out.push(self.0[(i, j)]);
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Frobenius norm, the default norm throughout the crate.
    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }

    pub fn spectral_norm(&self) -> f64 {
        self.eigenvalues()
            .iter()
            .fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }

    pub fn eigen(&self) -> SymmetricEigen<f64, nalgebra::Dyn> {
        SymmetricEigen::new(self.0.clone())
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        if self.dim() == 1 {
            return vec![self.0[(0, 0)]];
        }
        self.eigen().eigenvalues.iter().copied().collect()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().into_iter().fold(f64::INFINITY, f64::min)
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues()
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Inverse of a positive definite matrix.
    pub fn inverse(&self) -> Result<SymMatrix, MatError> {
        if !self.is_finite() {
            return Err(MatError::NonFinite);
        }
        if self.dim() == 1 {
            let v = self.0[(0, 0)];
            if v <= 0.0 {
                return Err(MatError::NotPositiveDefinite { min_eigenvalue: v });
            }
            return Ok(SymMatrix(DMatrix::from_element(1, 1, 1.0 / v)));
        }
        match self.0.clone().cholesky() {
            Some(ch) => Ok(SymMatrix::symmetrize(&ch.inverse())),
            None => Err(MatError::NotPositiveDefinite {
                min_eigenvalue: self.min_eigenvalue(),
            }),
        }
    }

    pub fn is_positive_definite(&self) -> bool {
        self.is_finite() && self.0.clone().cholesky().is_some()
    }

    /// `mᵀ · self · m`.
    pub fn congruence(&self, m: &DMatrix<f64>) -> SymMatrix {
        SymMatrix::symmetrize(&(m.transpose() * &self.0 * m))
    }

    /// `⟨x, self · x⟩`.
    pub fn quad_form(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.0 * x))
    }

    pub fn scale(&self, s: f64) -> SymMatrix {
        SymMatrix(&self.0 * s)
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.0 * x
    }
}

impl Add for &SymMatrix {
    type Output = SymMatrix;
    fn add(self, rhs: &SymMatrix) -> SymMatrix {
        SymMatrix(&self.0 + &rhs.0)
    }
}

impl Sub for &SymMatrix {
    type Output = SymMatrix;
    fn sub(self, rhs: &SymMatrix) -> SymMatrix {
        SymMatrix(&self.0 - &rhs.0)
    }
}

impl Mul<f64> for &SymMatrix {
    type Output = SymMatrix;
    fn mul(self, rhs: f64) -> SymMatrix {
        self.scale(rhs)
    }
}

/// Eigenvalue summary of a symmetric matrix under a PSD tolerance.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct PsdReport {
    pub min_eigenvalue: f64,
    pub is_psd: bool,
    pub is_pd: bool,
}

impl PsdReport {
    pub fn of(m: &SymMatrix, psd_tol: f64) -> Self {
        let min_eigenvalue = m.min_eigenvalue();
        PsdReport {
            min_eigenvalue,
            is_psd: min_eigenvalue >= -psd_tol,
            is_pd: min_eigenvalue > psd_tol,
        }
    }
}

/// Result of [`psd_project`]: the projected matrix and the largest negative
/// eigenvalue magnitude that was removed.
#[derive(Debug, Clone)]
pub struct Projection {
    pub matrix: SymMatrix,
    pub clamp: f64,
    /// `clamp > tol`: the input was outside the cone by more than rounding.
    pub exceeded: bool,
}

/// Spectral projection onto the PSD cone.
pub fn psd_project(m: &SymMatrix, tol: f64) -> Projection {
    // A successful Cholesky factorization certifies the input is already in
    // the cone, so it is its own projection.
    if m.dim() == 1 {
        let v = m.get(0, 0);
        let clamp = if v < 0.0 { -v } else { 0.0 };
        return Projection {
            matrix: SymMatrix(DMatrix::from_element(1, 1, v.max(0.0))),
            clamp,
            exceeded: clamp > tol,
        };
    }
    if m.is_positive_definite() {
        return Projection {
            matrix: m.clone(),
            clamp: 0.0,
            exceeded: false,
        };
    }
    let eig = m.eigen();
    let mut clamp = 0.0_f64;
    let clamped = eig.eigenvalues.map(|l| {
        if l < 0.0 {
            clamp = clamp.max(-l);
            0.0
        } else {
            l
        }
    });
    let v = &eig.eigenvectors;
    let rebuilt = v * DMatrix::from_diagonal(&clamped) * v.transpose();
    Projection {
        matrix: SymMatrix::symmetrize(&rebuilt),
        clamp,
        exceeded: clamp > tol,
    }
}

/// `a ⪰ b` up to `tol`.
pub fn psd_order(a: &SymMatrix, b: &SymMatrix, tol: f64) -> Result<bool, MatError> {
    if a.dim() != b.dim() {
        return Err(MatError::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    Ok((a - b).min_eigenvalue() >= -tol)
}

/// Scales `f` by `min(1, level / max_ij |f_ij|)`; the zero matrix maps to itself.
pub fn truncate(f: &SymMatrix, level: f64) -> SymMatrix {
    let fbar = f.max_abs();
    if fbar == 0.0 {
        return SymMatrix::zeros(f.dim());
    }
    let mut s = (level / fbar).min(1.0);
    if s == 1.0 {
        return f.clone();
    }
    // rounding in level / fbar can leave the largest entry one ulp above level
    while fbar * s > level {
        s = s.next_down();
    }
    f.scale(s)
}

/// Orthogonal projector onto the complement of `span(vectors)` in `R^dim`.
///
/// Dependent and repeated vectors are allowed; a Gram–Schmidt residual whose
/// norm is at most [`RANK_TOL`] times the largest input norm is dropped.
pub fn kernel_projection(dim: usize, vectors: &[DVector<f64>]) -> Result<SymMatrix, MatError> {
    if dim == 0 {
        return Err(MatError::EmptyDimension);
    }
    let mut max_norm = 0.0_f64;
    for v in vectors {
        if v.len() != dim {
            return Err(MatError::DimensionMismatch {
                expected: dim,
                found: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(MatError::NonFinite);
        }
        max_norm = max_norm.max(v.norm());
    }
    let cutoff = RANK_TOL * max_norm;
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for v in vectors {
        if basis.len() == dim {
            break;
        }
        let mut r = v.clone();
        // two passes of modified Gram–Schmidt
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&r);
                r.axpy(-c, q, 1.0);
            }
        }
        let n = r.norm();
        if n > cutoff && n > 0.0 {
            basis.push(r / n);
        }
    }
    let mut p = DMatrix::identity(dim, dim);
    for q in &basis {
        p -= q * q.transpose();
    }
    Ok(SymMatrix::symmetrize(&p))
}

/// PSD report of `Σ pᵢ Xᵢ⁻¹ − (Σ pᵢ Xᵢ)⁻¹`, which is PSD for any PD mixture.
pub fn matrix_harmonic_check(
    samples: &[(SymMatrix, f64)],
    psd_tol: f64,
) -> Result<PsdReport, MatError> {
    let first = samples.first().ok_or(MatError::Empty)?;
    let d = first.0.dim();
    let mut sum_p = 0.0;
    let mut mean = SymMatrix::zeros(d);
    let mut mean_inv = SymMatrix::zeros(d);
    for (x, p) in samples {
        if x.dim() != d {
            return Err(MatError::DimensionMismatch {
                expected: d,
                found: x.dim(),
            });
        }
        if *p < 0.0 {
            return Err(MatError::NegativeProbability(*p));
        }
        let inv = x.inverse()?;
        sum_p += p;
        mean = &mean + &x.scale(*p);
        mean_inv = &mean_inv + &inv.scale(*p);
    }
    if (sum_p - 1.0).abs() > 1e-12 {
        return Err(MatError::ProbabilitySum { sum: sum_p });
    }
    let gap = &mean_inv - &mean.inverse()?;
    Ok(PsdReport::of(&gap, psd_tol))
}

/// Last element of a PSD-nondecreasing sequence with a Cauchy diagnostic.
#[derive(Debug, Clone)]
pub struct MonotoneLimit {
    pub limit: SymMatrix,
    /// Frobenius norm of the final increment (0 for a single element).
    pub cauchy: f64,
}

pub fn monotone_limit(sequence: &[SymMatrix], tol: f64) -> Result<MonotoneLimit, MatError> {
    let last = sequence.last().ok_or(MatError::Empty)?;
    for (k, pair) in sequence.windows(2).enumerate() {
        let min_eig = (&pair[1] - &pair[0]).min_eigenvalue();
        if min_eig < -tol {
            return Err(MatError::MonotonicityViolation {
                index: k + 1,
                min_eigenvalue: min_eig,
            });
        }
    }
    let cauchy = match sequence.len() {
        0 | 1 => 0.0,
        n => (&sequence[n - 1] - &sequence[n - 2]).norm(),
    };
    Ok(MonotoneLimit {
        limit: last.clone(),
        cauchy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn close(a: &SymMatrix, b: &SymMatrix, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    #[test]
    fn construction_mirrors_upper_triangle() {
        let m =
            SymMatrix::from_upper(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 7.0, 3.0])).unwrap();
        assert_eq!(m.get(1, 0), 2.0);
        assert_eq!(m.get(0, 1), 2.0);
        assert!(matches!(
            SymMatrix::from_upper(DMatrix::zeros(2, 3)),
            Err(MatError::NotSquare { .. })
        ));
    }

    #[test]
    fn project_examples() {
        let p = psd_project(&SymMatrix::from_diagonal(&[1.0, 0.0]), PSD_TOL);
        assert!(close(
            &p.matrix,
            &SymMatrix::from_diagonal(&[1.0, 0.0]),
            0.0
        ));
        assert_eq!(p.clamp, 0.0);

        let p = psd_project(&SymMatrix::from_diagonal(&[1.0, -1e-14]), 1e-10);
        assert!(close(
            &p.matrix,
            &SymMatrix::from_diagonal(&[1.0, 0.0]),
            1e-15
        ));
        assert!(!p.exceeded);

        let p = psd_project(&SymMatrix::from_diagonal(&[2.0, -0.5]), 1e-10);
        assert!(close(
            &p.matrix,
            &SymMatrix::from_diagonal(&[2.0, 0.0]),
            1e-14
        ));
        assert_abs_diff_eq!(p.clamp, 0.5, epsilon = 1e-14);
        assert!(p.exceeded);
    }

    #[test]
    fn order_examples() {
        let two = SymMatrix::scalar(2, 2.0);
        let one = SymMatrix::identity(2);
        assert!(psd_order(&two, &one, 0.0).unwrap());
        assert!(psd_order(&one, &one, 0.0).unwrap());
        let a = SymMatrix::from_diagonal(&[1.0, 0.0]);
        let b = SymMatrix::from_diagonal(&[0.0, 1.0]);
        assert!(!psd_order(&a, &b, PSD_TOL).unwrap());
        assert!(psd_order(&a, &SymMatrix::identity(3), 0.0).is_err());
    }

    #[test]
    fn truncate_examples() {
        let t = truncate(&SymMatrix::from_diagonal(&[3.0, 0.5]), 1.0);
        assert!(close(
            &t,
            &SymMatrix::from_diagonal(&[1.0, 1.0 / 6.0]),
            1e-15
        ));
        let f = SymMatrix::from_diagonal(&[0.2, 0.1]);
        assert_eq!(truncate(&f, 1.0), f);
        let f = SymMatrix::from_rows(&[vec![2.0, 4.0], vec![4.0, 2.0]]).unwrap();
        let expected = SymMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(close(&truncate(&f, 2.0), &expected, 0.0));
        assert_eq!(truncate(&SymMatrix::zeros(2), 1.0), SymMatrix::zeros(2));
    }

    #[test]
    fn kernel_projection_examples() {
        let xi = kernel_projection(2, &[DVector::from_vec(vec![1.0, 0.0])]).unwrap();
        assert!(close(&xi, &SymMatrix::from_diagonal(&[0.0, 1.0]), 1e-15));
        assert_eq!(kernel_projection(3, &[]).unwrap(), SymMatrix::identity(3));
        let xi = kernel_projection(
            3,
            &[
                DVector::from_vec(vec![1.0, 0.0, 0.0]),
                DVector::from_vec(vec![1.0, 1.0, 0.0]),
            ],
        )
        .unwrap();
        assert!(close(
            &xi,
            &SymMatrix::from_diagonal(&[0.0, 0.0, 1.0]),
            1e-15
        ));
        assert!(matches!(
            kernel_projection(2, &[DVector::from_vec(vec![1.0, 0.0, 0.0])]),
            Err(MatError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn harmonic_check_examples() {
        let x = SymMatrix::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap();
        let r = matrix_harmonic_check(&[(x, 1.0)], PSD_TOL).unwrap();
        assert!(r.is_psd);
        assert!(r.min_eigenvalue.abs() < 1e-14);

        // scalar mixture: 1/2 (1 + 1/4) - 1/(5/2) = 0.225
        let r = matrix_harmonic_check(
            &[
                (SymMatrix::scalar(1, 1.0), 0.5),
                (SymMatrix::scalar(1, 4.0), 0.5),
            ],
            PSD_TOL,
        )
        .unwrap();
        assert_abs_diff_eq!(r.min_eigenvalue, 0.225, epsilon = 1e-15);

        let r = matrix_harmonic_check(
            &[
                (SymMatrix::from_diagonal(&[1.0, 2.0]), 0.25),
                (SymMatrix::from_diagonal(&[3.0, 0.5]), 0.75),
            ],
            PSD_TOL,
        )
        .unwrap();
        // coordinatewise: 0.25/1 + 0.75/3 - 1/2.5 and 0.25/2 + 0.75/0.5 - 1/0.875
        let c1: f64 = 0.25 + 0.25 - 1.0 / 2.5;
        let c2 = 0.125 + 1.5 - 1.0 / 0.875;
        assert_abs_diff_eq!(r.min_eigenvalue, c1.min(c2), epsilon = 1e-14);
        assert!(r.is_psd);

        assert!(matches!(
            matrix_harmonic_check(&[(SymMatrix::scalar(1, 1.0), 0.5)], PSD_TOL),
            Err(MatError::ProbabilitySum { .. })
        ));
        assert!(matches!(
            matrix_harmonic_check(&[(SymMatrix::from_diagonal(&[1.0, -1.0]), 1.0)], PSD_TOL),
            Err(MatError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn monotone_limit_examples() {
        let c = SymMatrix::scalar(2, 3.0);
        let r = monotone_limit(&[c.clone(), c.clone(), c.clone()], 0.0).unwrap();
        assert_eq!(r.limit, c);
        assert_eq!(r.cauchy, 0.0);

        let k_max = 50;
        let seq: Vec<_> = (1..=k_max)
            .map(|k| SymMatrix::scalar(1, k as f64 / (k as f64 + 1.0)))
            .collect();
        let r = monotone_limit(&seq, 0.0).unwrap();
        let k = k_max as f64;
        assert_abs_diff_eq!(r.limit.get(0, 0), k / (k + 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(r.cauchy, 1.0 / (k * (k + 1.0)), epsilon = 1e-15);

        let dec = vec![SymMatrix::scalar(1, 2.0), SymMatrix::scalar(1, 1.0)];
        assert!(matches!(
            monotone_limit(&dec, 1e-10),
            Err(MatError::MonotonicityViolation { index: 1, .. })
        ));
        assert!(monotone_limit(&[], 0.0).is_err());
    }
}
