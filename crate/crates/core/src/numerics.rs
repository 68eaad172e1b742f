//! Dense complex linear algebra shared by the estimators.
//!
//! Everything here is a thin layer over `nalgebra`: Hermitian
//! eigendecomposition with a descending eigenvalue order, polynomial roots via
//! the eigenvalues of a companion matrix, and the inverse square root of a
//! positive-definite Hermitian matrix.

use nalgebra::{linalg::Schur, linalg::SymmetricEigen, DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

/// Relative asymmetry tolerated before a matrix is rejected as non-Hermitian.
pub const HERMITIAN_TOL: f64 = 1e-10;

const EIG_EPS: f64 = 1e-15;
const EIG_MAX_ITER: usize = 10_000;
const NEWTON_POLISH_STEPS: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not Hermitian (relative asymmetry {asymmetry:.3e})")]
    NotHermitian { asymmetry: f64 },
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("eigenvalue iteration did not converge")]
    NoConvergence,
    #[error("leading polynomial coefficient is zero")]
    DegenerateLeadingCoefficient,
    #[error("matrix is near singular (eigenvalue ratio {ratio:.3e})")]
    NearSingular { ratio: f64 },
}

/// Eigenpairs of a Hermitian matrix, eigenvalues in descending order.
#[derive(Debug, Clone)]
pub struct HermEig {
    pub values: Vec<f64>,
    /// Column `i` is the unit eigenvector for `values[i]`.
    pub vectors: CMatrix,
}

impl HermEig {
    /// `V diag(values) V^H`.
    pub fn reconstruct(&self) -> CMatrix {
        let d = DVector::from_iterator(self.values.len(), self.values.iter().map(|&v| C64::from(v)));
        &self.vectors * CMatrix::from_diagonal(&d) * self.vectors.adjoint()
    }
}

/// Largest entry of `|m - m^H|` divided by `max(1, max |m_ij|)`.
pub fn hermitian_asymmetry(m: &CMatrix) -> f64 {
    let scale = m.iter().map(|z| z.norm()).fold(1.0_f64, f64::max);
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        for k in i..m.ncols() {
            worst = worst.max((m[(i, k)] - m[(k, i)].conj()).norm());
        }
    }
    worst / scale
}

/// `(m + m^H) / 2`.
pub fn hermitian_part(m: &CMatrix) -> CMatrix {
    (m + m.adjoint()).scale(0.5)
}

fn check_square_finite(m: &CMatrix) -> Result<(), NumericsError> {
    if m.nrows() != m.ncols() {
        return Err(NumericsError::NotSquare { rows: m.nrows(), cols: m.ncols() });
    }
    if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(NumericsError::NonFinite);
    }
    Ok(())
}

/// Eigendecomposition of a Hermitian matrix.
///
/// The input is symmetrized before the solve so that round-off below
/// [`HERMITIAN_TOL`] does not leak into the eigenvectors.
pub fn herm_eig(r: &CMatrix) -> Result<HermEig, NumericsError> {
    check_square_finite(r)?;
    let asymmetry = hermitian_asymmetry(r);
    if asymmetry > HERMITIAN_TOL {
        return Err(NumericsError::NotHermitian { asymmetry });
    }
    let n = r.nrows();
    if n == 0 {
        return Ok(HermEig { values: Vec::new(), vectors: CMatrix::zeros(0, 0) });
    }
    let eig = SymmetricEigen::try_new(hermitian_part(r), EIG_EPS, EIG_MAX_ITER)
        .ok_or(NumericsError::NoConvergence)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = CMatrix::from_fn(n, n, |row, col| eig.eigenvectors[(row, order[col])]);
    Ok(HermEig { values, vectors })
}

/// Evaluates `sum_k coeffs[k] z^k` by Horner's rule.
pub fn poly_eval(coeffs: &[C64], z: C64) -> C64 {
    coeffs.iter().rev().fold(C64::new(0.0, 0.0), |acc, &c| acc * z + c)
}

fn poly_eval_with_derivative(coeffs: &[C64], z: C64) -> (C64, C64) {
    let zero = C64::new(0.0, 0.0);
    coeffs.iter().rev().fold((zero, zero), |(p, dp), &c| (p * z + c, dp * z + p))
}

/// Eigenvalues of a general square complex matrix.
pub fn eigenvalues(m: &CMatrix) -> Result<Vec<C64>, NumericsError> {
    check_square_finite(m)?;
    if m.nrows() == 0 {
        return Ok(Vec::new());
    }
    let schur = Schur::try_new(m.clone(), EIG_EPS, EIG_MAX_ITER).ok_or(NumericsError::NoConvergence)?;
    let values = schur.eigenvalues().ok_or(NumericsError::NoConvergence)?;
    Ok(values.iter().copied().collect())
}

/// Roots of `sum_k coeffs[k] z^k` (coefficients in ascending degree).
///
/// Roots are the eigenvalues of the companion matrix of the monic polynomial,
/// each then polished with a few guarded Newton steps.
pub fn poly_roots(coeffs: &[C64]) -> Result<Vec<C64>, NumericsError> {
    if coeffs.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(NumericsError::NonFinite);
    }
    let degree = match coeffs.len() {
        0 => return Err(NumericsError::DegenerateLeadingCoefficient),
        len => len - 1,
    };
    let lead = coeffs[degree];
    let scale = coeffs.iter().map(|c| c.norm()).fold(0.0_f64, f64::max);
    if lead.norm() == 0.0 || lead.norm() <= 1e-14 * scale {
        return Err(NumericsError::DegenerateLeadingCoefficient);
    }
    if degree == 0 {
        return Ok(Vec::new());
    }

    let mut companion = CMatrix::zeros(degree, degree);
    for i in 1..degree {
        companion[(i, i - 1)] = C64::new(1.0, 0.0);
    }
    for i in 0..degree {
        companion[(i, degree - 1)] = -coeffs[i] / lead;
    }
    let mut roots = eigenvalues(&companion)?;

    for z in roots.iter_mut() {
        for _ in 0..NEWTON_POLISH_STEPS {
            let (p, dp) = poly_eval_with_derivative(coeffs, *z);
            if dp.norm() == 0.0 {
                break;
            }
            let candidate = *z - p / dp;
            if poly_eval(coeffs, candidate).norm() < p.norm() {
                *z = candidate;
            } else {
                break;
            }
        }
    }
    Ok(roots)
}

/// `m^{-1/2}` for a Hermitian positive-definite matrix.
///
/// Fails with [`NumericsError::NearSingular`] when the smallest eigenvalue is
/// below `1e-12` times the largest.
pub fn inv_sqrt_psd(m: &CMatrix) -> Result<CMatrix, NumericsError> {
    let eig = herm_eig(m)?;
    let n = eig.values.len();
    if n == 0 {
        return Ok(CMatrix::zeros(0, 0));
    }
    let max = eig.values[0];
    let min = eig.values[n - 1];
    let ratio = if max > 0.0 { min / max } else { f64::NEG_INFINITY };
    if !(ratio > 1e-12) {
        return Err(NumericsError::NearSingular { ratio });
    }
    let d = DVector::from_iterator(n, eig.values.iter().map(|&v| C64::from(1.0 / v.sqrt())));
    Ok(&eig.vectors * CMatrix::from_diagonal(&d) * eig.vectors.adjoint())
}

/// Frobenius norm of a complex matrix.
pub fn frobenius(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}
