//! Rank restoration for coherent sources.
//!
//! Coherent (fully correlated) sources collapse the signal covariance to rank
//! one. Subarray averaging restores it for arrays with a Vandermonde response
//! (ULA, or a UCA after phase-mode mapping):
//!
//! * FSS averages the `L` overlapping `p x p` diagonal blocks. It recovers up
//!   to `N / 2` sources.
//! * FBSS also averages the conjugate-reversed blocks `J R* J`, reaching
//!   `2N / 3` sources.
//! * Toeplitz reconstruction rebuilds a Hermitian Toeplitz matrix from the
//!   first row and keeps the full aperture, handling up to `N - 1` sources.

use crate::array::{ArrayError, CovarianceMatrix};
use crate::numerics::{hermitian_part, CMatrix, C64};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecorrelationError {
    #[error("invalid smoothing plan: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Array(#[from] ArrayError),
}

/// Subarray partition of an `N`-element array for a declared source count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SmoothingPlan {
    elements: usize,
    subarray_len: usize,
    subarray_count: usize,
    sources: usize,
}

impl SmoothingPlan {
    /// Subarrays of length `subarray_len` over `elements` elements, for `sources`
    /// declared sources. Method-specific capacity is checked by [`fss`] and [`fbss`].
    pub fn new(elements: usize, subarray_len: usize, sources: usize) -> Result<Self, DecorrelationError> {
        if subarray_len == 0 || subarray_len > elements {
            return Err(DecorrelationError::InvalidPlan(format!(
                "subarray length {subarray_len} must lie in 1..={elements}"
            )));
        }
        Ok(Self { elements, subarray_len, subarray_count: elements - subarray_len + 1, sources })
    }

    /// The shortest subarray that can hold `sources` sources, `p = M + 1`.
    pub fn minimal(elements: usize, sources: usize) -> Result<Self, DecorrelationError> {
        Self::new(elements, sources + 1, sources)
    }

    pub fn elements(&self) -> usize {
        self.elements
    }

    pub fn subarray_len(&self) -> usize {
        self.subarray_len
    }

    pub fn subarray_count(&self) -> usize {
        self.subarray_count
    }

    pub fn sources(&self) -> usize {
        self.sources
    }

    /// `p > M` and `L >= M`.
    pub fn validate_forward(&self) -> Result<(), DecorrelationError> {
        self.check_len()?;
        if self.subarray_count < self.sources {
            return Err(DecorrelationError::InvalidPlan(format!(
                "{} forward subarrays cannot decorrelate {} sources",
                self.subarray_count, self.sources
            )));
        }
        Ok(())
    }

    /// `p > M` and `2L >= M`.
    pub fn validate_forward_backward(&self) -> Result<(), DecorrelationError> {
        self.check_len()?;
        if 2 * self.subarray_count < self.sources {
            return Err(DecorrelationError::InvalidPlan(format!(
                "{} forward/backward subarray pairs cannot decorrelate {} sources",
                self.subarray_count, self.sources
            )));
        }
        Ok(())
    }

    fn check_len(&self) -> Result<(), DecorrelationError> {
        if self.subarray_len <= self.sources {
            return Err(DecorrelationError::InvalidPlan(format!(
                "subarray length {} must exceed the {} sources",
                self.subarray_len, self.sources
            )));
        }
        Ok(())
    }

    fn check_dim(&self, r: &CovarianceMatrix) -> Result<(), DecorrelationError> {
        if r.dim() != self.elements {
            return Err(DecorrelationError::InvalidPlan(format!(
                "plan is for {} elements, covariance has {}",
                self.elements,
                r.dim()
            )));
        }
        Ok(())
    }
}

fn forward_average(r: &CMatrix, plan: &SmoothingPlan) -> CMatrix {
    let p = plan.subarray_len;
    let mut acc = CMatrix::zeros(p, p);
    for k in 0..plan.subarray_count {
        acc += r.view((k, k), (p, p));
    }
    acc.unscale(plan.subarray_count as f64)
}

/// `J M* J` with `J` the exchange matrix.
fn exchange_conjugate(m: &CMatrix) -> CMatrix {
    let n = m.nrows();
    CMatrix::from_fn(n, n, |i, k| m[(n - 1 - i, n - 1 - k)].conj())
}

/// Forward spatial smoothing.
pub fn fss(r: &CovarianceMatrix, plan: &SmoothingPlan) -> Result<CovarianceMatrix, DecorrelationError> {
    plan.check_dim(r)?;
    plan.validate_forward()?;
    Ok(CovarianceMatrix::from_hermitian(hermitian_part(&forward_average(r.as_matrix(), plan)))?)
}

/// Forward/backward spatial smoothing.
pub fn fbss(r: &CovarianceMatrix, plan: &SmoothingPlan) -> Result<CovarianceMatrix, DecorrelationError> {
    plan.check_dim(r)?;
    plan.validate_forward_backward()?;
    let forward = forward_average(r.as_matrix(), plan);
    let backward = exchange_conjugate(&forward);
    Ok(CovarianceMatrix::from_hermitian(hermitian_part(&(forward + backward).scale(0.5)))?)
}

/// Hermitian Toeplitz matrix generated by the first row of `r`.
pub fn toeplitz_reconstruct(r: &CovarianceMatrix) -> CovarianceMatrix {
    let m = r.as_matrix();
    let n = m.nrows();
    let row: Vec<C64> = (0..n).map(|k| m[(0, k)]).collect();
    let t = CMatrix::from_fn(n, n, |i, k| {
        if i == k {
            C64::from(row[0].re)
        } else if k > i {
            row[k - i]
        } else {
            row[i - k].conj()
        }
    });
    CovarianceMatrix::from_hermitian(t).expect("Toeplitz construction is Hermitian")
}

/// Pre-processing applied to a covariance before subspace estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Decorrelation {
    #[default]
    None,
    Fss,
    Fbss,
    Toeplitz,
}

/// Applies `method` for `sources` declared sources. `subarray_len` overrides
/// the default `M + 1` for the smoothing methods.
pub fn apply(
    r: &CovarianceMatrix,
    method: Decorrelation,
    sources: usize,
    subarray_len: Option<usize>,
) -> Result<CovarianceMatrix, DecorrelationError> {
    let plan = || match subarray_len {
        Some(p) => SmoothingPlan::new(r.dim(), p, sources),
        None => SmoothingPlan::minimal(r.dim(), sources),
    };
    match method {
        Decorrelation::None => Ok(r.clone()),
        Decorrelation::Fss => fss(r, &plan()?),
        Decorrelation::Fbss => fbss(r, &plan()?),
        Decorrelation::Toeplitz => Ok(toeplitz_reconstruct(r)),
    }
}
