//! Narrowband array signal model.
//!
//! Snapshots follow `x(t) = A(theta) s(t) + n(t)`. Two geometries are
//! supported:
//!
//! * ULA, angle measured from broadside, element `n` responds with
//!   `e^{-j n phi}`, `phi = 2 pi (d / lambda) sin(theta)`.
//! * UCA in the x-y plane, azimuth counter-clockwise from +x, element `n` at
//!   angle `theta_n = 2 pi n / N` responds with `e^{j zeta cos(theta - theta_n)}`,
//!   `zeta = (2 pi r / lambda) sin(theta_e)` for a known elevation `theta_e`.
//!
//! SNR is total source power over per-element noise power.

use crate::geometry::Position2D;
use crate::numerics::{herm_eig, hermitian_asymmetry, hermitian_part, CMatrix, CVector, NumericsError, C64};
use rand::Rng;
use rand_distr::StandardNormal;
use std::f64::consts::{FRAC_PI_2, PI};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArrayError {
    #[error("operation requires a {expected} geometry")]
    WrongGeometry { expected: &'static str },
    #[error("invalid array parameter {name} = {value}")]
    InvalidGeometry { name: &'static str, value: f64 },
    #[error("{sources} sources cannot be resolved by {elements} elements")]
    TooManySources { sources: usize, elements: usize },
    #[error("invalid source set: {0}")]
    InvalidSources(String),
    #[error("expected length {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("snapshot matrix needs at least one finite column")]
    InvalidSnapshots,
    #[error("covariance is not Hermitian positive semidefinite: {0}")]
    InvalidCovariance(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Array layout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ArrayKind {
    Ula { elements: usize, spacing: f64 },
    Uca { elements: usize, radius: f64, elevation: f64 },
}

/// An array layout at a given carrier wavelength.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArrayGeometry {
    kind: ArrayKind,
    wavelength: f64,
}

fn positive(name: &'static str, value: f64) -> Result<(), ArrayError> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(ArrayError::InvalidGeometry { name, value })
    }
}

fn enough_elements(n: usize) -> Result<(), ArrayError> {
    if n >= 2 {
        Ok(())
    } else {
        Err(ArrayError::InvalidGeometry { name: "elements", value: n as f64 })
    }
}

impl ArrayGeometry {
    pub fn ula(elements: usize, spacing: f64, wavelength: f64) -> Result<Self, ArrayError> {
        enough_elements(elements)?;
        positive("spacing", spacing)?;
        positive("wavelength", wavelength)?;
        Ok(Self { kind: ArrayKind::Ula { elements, spacing }, wavelength })
    }

    pub fn uca(elements: usize, radius: f64, elevation: f64, wavelength: f64) -> Result<Self, ArrayError> {
        enough_elements(elements)?;
        positive("radius", radius)?;
        positive("wavelength", wavelength)?;
        if !(0.0..=FRAC_PI_2).contains(&elevation) {
            return Err(ArrayError::InvalidGeometry { name: "elevation", value: elevation });
        }
        Ok(Self { kind: ArrayKind::Uca { elements, radius, elevation }, wavelength })
    }

    pub fn kind(&self) -> ArrayKind {
        self.kind
    }

    pub fn wavelength(&self) -> f64 {
        self.wavelength
    }

    pub fn elements(&self) -> usize {
        match self.kind {
            ArrayKind::Ula { elements, .. } | ArrayKind::Uca { elements, .. } => elements,
        }
    }

    pub fn is_ula(&self) -> bool {
        matches!(self.kind, ArrayKind::Ula { .. })
    }

    pub fn is_uca(&self) -> bool {
        matches!(self.kind, ArrayKind::Uca { .. })
    }

    /// ULA element spacing.
    pub fn spacing(&self) -> Option<f64> {
        match self.kind {
            ArrayKind::Ula { spacing, .. } => Some(spacing),
            ArrayKind::Uca { .. } => None,
        }
    }

    /// UCA radius.
    pub fn radius(&self) -> Option<f64> {
        match self.kind {
            ArrayKind::Uca { radius, .. } => Some(radius),
            ArrayKind::Ula { .. } => None,
        }
    }

    /// UCA phase argument `zeta = (2 pi r / lambda) sin(theta_e)`.
    pub fn zeta(&self) -> Option<f64> {
        match self.kind {
            ArrayKind::Uca { radius, elevation, .. } => Some(2.0 * PI * radius / self.wavelength * elevation.sin()),
            ArrayKind::Ula { .. } => None,
        }
    }

    /// Steering vector for either geometry.
    pub fn steering(&self, theta: f64) -> CVector {
        match self.kind {
            ArrayKind::Ula { elements, spacing } => {
                let phi = 2.0 * PI * spacing / self.wavelength * theta.sin();
                CVector::from_fn(elements, |n, _| C64::from_polar(1.0, -(n as f64) * phi))
            }
            ArrayKind::Uca { elements, .. } => {
                let zeta = self.zeta().unwrap_or(0.0);
                CVector::from_fn(elements, |n, _| {
                    let theta_n = 2.0 * PI * n as f64 / elements as f64;
                    C64::from_polar(1.0, zeta * (theta - theta_n).cos())
                })
            }
        }
    }

    /// Columns are steering vectors for `thetas`.
    pub fn steering_matrix(&self, thetas: &[f64]) -> CMatrix {
        let mut a = CMatrix::zeros(self.elements(), thetas.len());
        for (k, &theta) in thetas.iter().enumerate() {
            a.set_column(k, &self.steering(theta));
        }
        a
    }

    /// UCA element positions relative to the array center.
    pub fn element_offsets(&self) -> Result<Vec<Position2D>, ArrayError> {
        match self.kind {
            ArrayKind::Uca { elements, radius, .. } => Ok((0..elements)
                .map(|n| Position2D::from_polar(radius, 2.0 * PI * n as f64 / elements as f64))
                .collect()),
            ArrayKind::Ula { .. } => Err(ArrayError::WrongGeometry { expected: "UCA" }),
        }
    }
}

pub fn ula_steering(theta: f64, g: &ArrayGeometry) -> Result<CVector, ArrayError> {
    if g.is_ula() {
        Ok(g.steering(theta))
    } else {
        Err(ArrayError::WrongGeometry { expected: "ULA" })
    }
}

pub fn uca_steering(theta: f64, g: &ArrayGeometry) -> Result<CVector, ArrayError> {
    if g.is_uca() {
        Ok(g.steering(theta))
    } else {
        Err(ArrayError::WrongGeometry { expected: "UCA" })
    }
}

/// Far-field sources impinging on the array.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSet {
    azimuths: Vec<f64>,
    amplitudes: Vec<f64>,
    phases: Vec<f64>,
    coherent: bool,
}

impl SourceSet {
    pub fn new(azimuths: Vec<f64>, amplitudes: Vec<f64>, coherent: bool) -> Result<Self, ArrayError> {
        if azimuths.len() != amplitudes.len() {
            return Err(ArrayError::LengthMismatch { expected: azimuths.len(), got: amplitudes.len() });
        }
        if azimuths.iter().any(|a| !a.is_finite()) {
            return Err(ArrayError::InvalidSources("non-finite azimuth".into()));
        }
        if amplitudes.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(ArrayError::InvalidSources("amplitudes must be positive".into()));
        }
        for i in 0..azimuths.len() {
            for k in i + 1..azimuths.len() {
                if azimuths[i] == azimuths[k] {
                    return Err(ArrayError::InvalidSources(format!("sources {i} and {k} share an azimuth")));
                }
            }
        }
        let phases = vec![0.0; azimuths.len()];
        Ok(Self { azimuths, amplitudes, phases, coherent })
    }

    /// Sets per-source carrier phases in radians. Coherent multipath copies
    /// arrive with path-dependent phases; with all phases equal and a
    /// centro-symmetric array, backward averaging adds no rank.
    pub fn with_phases(mut self, phases: Vec<f64>) -> Result<Self, ArrayError> {
        if phases.len() != self.len() {
            return Err(ArrayError::LengthMismatch { expected: self.len(), got: phases.len() });
        }
        if phases.iter().any(|p| !p.is_finite()) {
            return Err(ArrayError::InvalidSources("non-finite phase".into()));
        }
        self.phases = phases;
        Ok(self)
    }

    /// Uncorrelated unit-amplitude sources.
    pub fn uncorrelated(azimuths: Vec<f64>) -> Result<Self, ArrayError> {
        let n = azimuths.len();
        Self::new(azimuths, vec![1.0; n], false)
    }

    /// Fully coherent unit-amplitude sources.
    pub fn coherent(azimuths: Vec<f64>) -> Result<Self, ArrayError> {
        let n = azimuths.len();
        Self::new(azimuths, vec![1.0; n], true)
    }

    pub fn azimuths(&self) -> &[f64] {
        &self.azimuths
    }

    pub fn amplitudes(&self) -> &[f64] {
        &self.amplitudes
    }

    pub fn phases(&self) -> &[f64] {
        &self.phases
    }

    /// Complex path gains `rho_m e^{j phi_m}`.
    pub fn gains(&self) -> Vec<C64> {
        self.amplitudes.iter().zip(&self.phases).map(|(&r, &p)| C64::from_polar(r, p)).collect()
    }

    pub fn is_coherent(&self) -> bool {
        self.coherent
    }

    pub fn len(&self) -> usize {
        self.azimuths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.azimuths.is_empty()
    }

    /// `sum rho_m^2`.
    pub fn total_power(&self) -> f64 {
        self.amplitudes.iter().map(|r| r * r).sum()
    }

    /// Source covariance: `diag(rho^2)`, or `g g^H` over the complex gains
    /// for coherent sources.
    pub fn covariance(&self) -> CMatrix {
        let m = self.len();
        let rho = &self.amplitudes;
        if self.coherent {
            let g = self.gains();
            CMatrix::from_fn(m, m, |i, k| g[i] * g[k].conj())
        } else {
            CMatrix::from_fn(m, m, |i, k| if i == k { C64::from(rho[i] * rho[i]) } else { C64::from(0.0) })
        }
    }
}

/// Array output, one column per snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotMatrix(CMatrix);

impl SnapshotMatrix {
    pub fn new(x: CMatrix) -> Result<Self, ArrayError> {
        if x.ncols() == 0 || x.nrows() == 0 || x.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(ArrayError::InvalidSnapshots);
        }
        Ok(Self(x))
    }

    pub fn as_matrix(&self) -> &CMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> CMatrix {
        self.0
    }

    pub fn elements(&self) -> usize {
        self.0.nrows()
    }

    pub fn snapshots(&self) -> usize {
        self.0.ncols()
    }
}

/// Hermitian covariance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix(CMatrix);

/// Relative asymmetry accepted by [`CovarianceMatrix`].
pub const COVARIANCE_HERMITIAN_TOL: f64 = 1e-12;

impl CovarianceMatrix {
    /// Checks Hermitian symmetry and positive semidefiniteness
    /// (smallest eigenvalue at least `-1e-10 trace`).
    pub fn new(r: CMatrix) -> Result<Self, ArrayError> {
        let c = Self::from_hermitian(r)?;
        let eig = herm_eig(&c.0)?;
        let min = eig.values.last().copied().unwrap_or(0.0);
        if min < -1e-10 * c.trace().abs().max(f64::MIN_POSITIVE) {
            return Err(ArrayError::InvalidCovariance(format!("smallest eigenvalue {min:.3e}")));
        }
        Ok(c)
    }

    /// Checks Hermitian symmetry only. Used for reconstructed matrices that
    /// are not guaranteed to be semidefinite.
    pub fn from_hermitian(r: CMatrix) -> Result<Self, ArrayError> {
        if r.nrows() != r.ncols() || r.nrows() == 0 {
            return Err(ArrayError::InvalidCovariance(format!("shape {}x{}", r.nrows(), r.ncols())));
        }
        if r.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(ArrayError::InvalidCovariance("non-finite entry".into()));
        }
        let asym = hermitian_asymmetry(&r);
        if asym > COVARIANCE_HERMITIAN_TOL {
            return Err(ArrayError::InvalidCovariance(format!("asymmetry {asym:.3e}")));
        }
        Ok(Self(hermitian_part(&r)))
    }

    pub fn as_matrix(&self) -> &CMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> CMatrix {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.0.diagonal().iter().map(|z| z.re).sum()
    }

    /// Eigenvalues above `rel_tol * trace`.
    pub fn numerical_rank(&self, rel_tol: f64) -> Result<usize, ArrayError> {
        let eig = herm_eig(&self.0)?;
        let threshold = rel_tol * self.trace().abs();
        Ok(eig.values.iter().filter(|&&v| v > threshold).count())
    }
}

/// Per-element noise variance giving `snr_db` for `src`. The reference power
/// is `sum rho^2`, or 1 when there are no sources.
pub fn noise_variance_for_snr(src: &SourceSet, snr_db: f64) -> f64 {
    let reference = if src.is_empty() { 1.0 } else { src.total_power() };
    if snr_db == f64::INFINITY {
        0.0
    } else {
        reference / 10f64.powf(snr_db / 10.0)
    }
}

/// `rows x cols` circular complex Gaussian entries with the given variance.
pub fn complex_gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, variance: f64, rng: &mut R) -> CMatrix {
    let s = (variance / 2.0).sqrt();
    CMatrix::from_fn(rows, cols, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        C64::new(s * re, s * im)
    })
}

/// Draws `k` snapshots of `src` through `g` at `snr_db` (`+inf` for no noise).
///
/// Uncorrelated sources carry independent unit-power waveforms scaled by
/// `rho_m`; coherent sources share one waveform with zero relative phase. The
/// random stream is consumed in a fixed order (waveforms, then noise) so the
/// draw does not depend on the SNR.
pub fn synthesize_snapshots<R: Rng + ?Sized>(
    g: &ArrayGeometry,
    src: &SourceSet,
    k: usize,
    snr_db: f64,
    rng: &mut R,
) -> Result<SnapshotMatrix, ArrayError> {
    let n = g.elements();
    if src.len() >= n {
        return Err(ArrayError::TooManySources { sources: src.len(), elements: n });
    }
    if k == 0 {
        return Err(ArrayError::InvalidSnapshots);
    }
    if snr_db.is_nan() {
        return Err(ArrayError::InvalidGeometry { name: "snr_db", value: snr_db });
    }
    let m = src.len();
    let gains = src.gains();
    let waveforms = if src.is_coherent() {
        let shared = complex_gaussian(1, k, 1.0, rng);
        CMatrix::from_fn(m, k, |i, t| shared[(0, t)] * gains[i])
    } else {
        let w = complex_gaussian(m, k, 1.0, rng);
        CMatrix::from_fn(m, k, |i, t| w[(i, t)] * gains[i])
    };
    let noise = complex_gaussian(n, k, noise_variance_for_snr(src, snr_db), rng);
    let a = g.steering_matrix(src.azimuths());
    SnapshotMatrix::new(a * waveforms + noise)
}

/// `(1/K) X X^H`, symmetrized.
pub fn sample_covariance(x: &SnapshotMatrix) -> CovarianceMatrix {
    let m = x.as_matrix();
    let r = (m * m.adjoint()).unscale(m.ncols() as f64);
    CovarianceMatrix(hermitian_part(&r))
}

/// Expected covariance `A R_s A^H + sigma_n^2 I`.
pub fn analytic_covariance(g: &ArrayGeometry, src: &SourceSet, noise_variance: f64) -> CovarianceMatrix {
    let a = g.steering_matrix(src.azimuths());
    let n = g.elements();
    let r = &a * src.covariance() * a.adjoint() + CMatrix::identity(n, n).scale(noise_variance.max(0.0));
    CovarianceMatrix(hermitian_part(&r))
}

/// Array factor `w^H a(theta)` over `grid`.
pub fn beampattern(g: &ArrayGeometry, weights: &CVector, grid: &[f64]) -> Result<Vec<C64>, ArrayError> {
    if weights.len() != g.elements() {
        return Err(ArrayError::LengthMismatch { expected: g.elements(), got: weights.len() });
    }
    Ok(grid.iter().map(|&theta| weights.dotc(&g.steering(theta))).collect())
}
