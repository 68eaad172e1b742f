//! Phase-mode excitation: maps a uniform circular array onto a virtual ULA.
//!
//! By the Jacobi-Anger expansion the UCA response decomposes into phase modes
//! `j^p J_p(zeta) e^{j p theta}`. The transform
//!
//! 1. extracts modes `p = -h..=h` with the spatial DFT rows
//!    `F_p = (1/N) [e^{j 2 pi p n / N}]_n`,
//! 2. removes the mode gains with `J = diag(1 / (j^p J_p(zeta)))`,
//!
//! giving `Tv = J F` and `Tv a(theta) ~ [e^{j p theta}]_{p=-h..h}`, a
//! Vandermonde vector. `Tw = (Tv Tv^H)^{-1/2} Tv` has orthonormal rows, so
//! white element noise stays white after mapping.

use crate::array::{ArrayError, ArrayGeometry, CovarianceMatrix, SnapshotMatrix};
use crate::numerics::{hermitian_part, inv_sqrt_psd, CMatrix, CVector, NumericsError, C64};
use std::f64::consts::PI;
use thiserror::Error;

/// Largest Bessel order supported by [`bessel_j`].
pub const MAX_BESSEL_ORDER: i32 = 64;
/// Largest Bessel argument supported by [`bessel_j`].
pub const MAX_BESSEL_ARG: f64 = 128.0;
/// Mode gains below this magnitude make the transform ill-posed.
pub const MIN_MODE_GAIN: f64 = 1e-10;

const SERIES_LIMIT: f64 = 12.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PmeError {
    #[error("Bessel J_{order}({arg}) is outside the supported range")]
    OutOfSupportedRange { order: i32, arg: f64 },
    #[error("{elements} elements cannot excite modes up to h = {h} (need N > 2h)")]
    InsufficientElements { elements: usize, h: usize },
    #[error("mode {mode} has gain J_p(zeta) = {gain:.3e}, too close to zero")]
    BesselNearZero { mode: i32, gain: f64 },
    #[error("expected {expected} rows, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Array(#[from] ArrayError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Highest phase mode `floor(2 pi r / lambda)` a ring of radius `r` supports.
pub fn max_mode(radius: f64, wavelength: f64) -> usize {
    let h = (2.0 * PI * radius / wavelength).floor();
    if h.is_finite() && h > 0.0 {
        h as usize
    } else {
        0
    }
}

/// Bessel function of the first kind, integer order.
///
/// Power series for `zeta <= 12`, Miller's backward recurrence normalized by
/// `J_0 + 2 sum J_2k = 1` above that. Negative orders use
/// `J_{-p} = (-1)^p J_p`.
pub fn bessel_j(p: i32, zeta: f64) -> Result<f64, PmeError> {
    if p.abs() > MAX_BESSEL_ORDER || !(0.0..=MAX_BESSEL_ARG).contains(&zeta) {
        return Err(PmeError::OutOfSupportedRange { order: p, arg: zeta });
    }
    let order = p.unsigned_abs() as usize;
    let value = if zeta <= SERIES_LIMIT { bessel_series(order, zeta) } else { bessel_miller(order, zeta) };
    Ok(if p < 0 && order % 2 == 1 { -value } else { value })
}

fn bessel_series(p: usize, x: f64) -> f64 {
    if x == 0.0 {
        return if p == 0 { 1.0 } else { 0.0 };
    }
    let half = 0.5 * x;
    let mut term = (1..=p).fold(1.0, |acc, i| acc * half / i as f64);
    let mut sum = term;
    let q = half * half;
    let mut k = 0usize;
    loop {
        k += 1;
        term *= -q / (k as f64 * (k + p) as f64);
        sum += term;
        if term.abs() <= 1e-17 * sum.abs() && k as f64 > half {
            break;
        }
        if k > 500 {
            break;
        }
    }
    sum
}

fn bessel_miller(p: usize, x: f64) -> f64 {
    let top = p.max(x as usize);
    let mut start = top + 30 + (40.0 * top as f64).sqrt() as usize;
    start += start % 2;
    let (mut next, mut current) = (0.0_f64, 1e-300_f64);
    let mut norm = 0.0;
    let mut wanted = 0.0;
    for k in (1..=start).rev() {
        // J_{k-1} = (2k / x) J_k - J_{k+1}
        let prev = 2.0 * k as f64 / x * current - next;
        next = current;
        current = prev;
        let idx = k - 1;
        if idx == p {
            wanted = current;
        }
        if idx > 0 && idx % 2 == 0 {
            norm += 2.0 * current;
        }
        if current.abs() > 1e250 {
            current *= 1e-250;
            next *= 1e-250;
            norm *= 1e-250;
            wanted *= 1e-250;
        }
    }
    norm += current;
    wanted / norm
}

/// Ideal virtual-ULA response `[e^{j p theta}]` for `p = -h..=h`.
pub fn vula_steering(theta: f64, h: usize) -> CVector {
    let hi = h as i64;
    CVector::from_fn(2 * h + 1, |i, _| C64::from_polar(1.0, (i as i64 - hi) as f64 * theta))
}

/// UCA to virtual-ULA mapping matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct PmeTransform {
    h: usize,
    elements: usize,
    zeta: f64,
    f: CMatrix,
    j: CVector,
    tv: CMatrix,
    tw: CMatrix,
    whitener: CMatrix,
}

impl PmeTransform {
    pub fn h(&self) -> usize {
        self.h
    }

    /// Virtual array length `2h + 1`.
    pub fn len(&self) -> usize {
        2 * self.h + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn elements(&self) -> usize {
        self.elements
    }

    pub fn zeta(&self) -> f64 {
        self.zeta
    }

    /// Phase-mode extraction rows.
    pub fn f(&self) -> &CMatrix {
        &self.f
    }

    /// Diagonal of the mode-gain correction, modes `-h..=h`.
    pub fn j_diag(&self) -> &CVector {
        &self.j
    }

    pub fn tv(&self) -> &CMatrix {
        &self.tv
    }

    pub fn tw(&self) -> &CMatrix {
        &self.tw
    }

    /// `(Tv Tv^H)^{-1/2}`, so that `Tw = whitener * Tv`.
    pub fn whitener(&self) -> &CMatrix {
        &self.whitener
    }

    fn matrix(&self, prewhitened: bool) -> &CMatrix {
        if prewhitened {
            &self.tw
        } else {
            &self.tv
        }
    }

    /// Response of the mapped array to a source at `theta`, in the ideal
    /// Vandermonde model: `a_sv` for `Tv`, `whitener * a_sv` for `Tw`.
    pub fn ideal_steering(&self, theta: f64, prewhitened: bool) -> CVector {
        let a = vula_steering(theta, self.h);
        if prewhitened {
            &self.whitener * a
        } else {
            a
        }
    }
}

/// Builds the transform with the largest usable order.
///
/// The order starts at [`max_mode`] and is clamped to `(N - 1) / 2` when the
/// ring has too few elements; a warning is logged in that case.
pub fn build_transform(g: &ArrayGeometry) -> Result<PmeTransform, PmeError> {
    let radius = g.radius().ok_or(ArrayError::WrongGeometry { expected: "UCA" })?;
    let mut h = max_mode(radius, g.wavelength());
    let limit = (g.elements() - 1) / 2;
    if h > limit {
        log::warn!("phase-mode order {h} clamped to {limit} for a {}-element ring", g.elements());
        h = limit;
    }
    build_transform_with_order(g, h)
}

/// Builds the transform for an explicit highest mode `h`.
pub fn build_transform_with_order(g: &ArrayGeometry, h: usize) -> Result<PmeTransform, PmeError> {
    let zeta = g.zeta().ok_or(ArrayError::WrongGeometry { expected: "UCA" })?;
    let n = g.elements();
    if n <= 2 * h {
        return Err(PmeError::InsufficientElements { elements: n, h });
    }
    let rows = 2 * h + 1;
    let hi = h as i64;
    let f = CMatrix::from_fn(rows, n, |i, k| {
        let p = (i as i64 - hi) as f64;
        C64::from_polar(1.0 / n as f64, 2.0 * PI * p * k as f64 / n as f64)
    });
    let mut j = CVector::zeros(rows);
    for i in 0..rows {
        let p = (i as i64 - hi) as i32;
        let gain = bessel_j(p, zeta)?;
        if gain.abs() < MIN_MODE_GAIN {
            return Err(PmeError::BesselNearZero { mode: p, gain });
        }
        j[i] = C64::new(1.0, 0.0) / (C64::i().powi(p) * gain);
    }
    let tv = CMatrix::from_fn(rows, n, |i, k| j[i] * f[(i, k)]);
    let whitener = inv_sqrt_psd(&hermitian_part(&(&tv * tv.adjoint())))?;
    let tw = &whitener * &tv;
    Ok(PmeTransform { h, elements: n, zeta, f, j, tv, tw, whitener })
}

/// Maps element-space snapshots to the virtual ULA (`Tv X` or `Tw X`).
pub fn to_vula(x: &SnapshotMatrix, t: &PmeTransform, prewhitened: bool) -> Result<SnapshotMatrix, PmeError> {
    if x.elements() != t.elements {
        return Err(PmeError::DimensionMismatch { expected: t.elements, got: x.elements() });
    }
    Ok(SnapshotMatrix::new(t.matrix(prewhitened) * x.as_matrix())?)
}

/// Maps an element-space covariance: `T R T^H`.
pub fn map_covariance(r: &CovarianceMatrix, t: &PmeTransform, prewhitened: bool) -> Result<CovarianceMatrix, PmeError> {
    if r.dim() != t.elements {
        return Err(PmeError::DimensionMismatch { expected: t.elements, got: r.dim() });
    }
    let m = t.matrix(prewhitened);
    Ok(CovarianceMatrix::from_hermitian(hermitian_part(&(m * r.as_matrix() * m.adjoint())))?)
}
