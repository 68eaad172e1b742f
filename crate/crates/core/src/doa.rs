//! Subspace direction-of-arrival estimators.
//!
//! All estimators start from the eigendecomposition of a covariance matrix:
//! the `M` dominant eigenvectors span the signal subspace `Vs`, the rest the
//! noise subspace `Vn`, and every steering vector of a true source is
//! orthogonal to `Vn`.
//!
//! * MUSIC scans `P(theta) = a^H a / (a^H Vn Vn^H a)` over a grid, picks the
//!   `M` strongest local maxima and refines each on the continuous spectrum.
//! * Root-MUSIC roots the polynomial form of the denominator.
//! * ESPRIT solves the shift relation `V2 = V1 Psi` between two displaced
//!   subarrays and reads the angles off the eigenvalues of `Psi`.
//!
//! The UCA variants run Root-MUSIC and ESPRIT on the virtual ULA produced by
//! phase-mode excitation.

use crate::array::{sample_covariance, ArrayError, ArrayGeometry, CovarianceMatrix, SnapshotMatrix};
use crate::numerics::{self, herm_eig, poly_roots, CMatrix, CVector, NumericsError, C64};
use crate::pme::{map_covariance, PmeError, PmeTransform};
use std::f64::consts::{FRAC_PI_2, PI};
use thiserror::Error;

/// Default MUSIC grid step, 0.1 degree.
pub const DEFAULT_GRID_STEP: f64 = 0.1 * PI / 180.0;

/// Roots within this distance outside the unit circle still count as inside,
/// so that noiseless double roots are not lost to round-off.
const UNIT_CIRCLE_SLACK: f64 = 1e-6;
/// Roots closer than this are one numerically split double root.
const DOUBLE_ROOT_MERGE: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DoaError {
    #[error("{sources} sources exceed the estimator capacity for dimension {dim}")]
    TooManySources { sources: usize, dim: usize },
    #[error("at least one source must be requested")]
    TooFewSources,
    #[error("found {found} spectrum peaks, {requested} requested")]
    NoPeaksFound { found: usize, requested: usize },
    #[error("polynomial rooting failed: {0}")]
    RootSolveFailure(String),
    #[error("arcsin argument {0} is outside [-1, 1]")]
    ArcsinOutOfRange(f64),
    #[error("subspace is rank deficient")]
    RankDeficientSubspace,
    #[error("grid step {0} must be positive and finite")]
    InvalidGridStep(f64),
    #[error("covariance is {got}-dimensional, manifold expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("estimator requires a {expected} geometry")]
    WrongGeometry { expected: &'static str },
    #[error("covariance is not Hermitian")]
    NonHermitian,
    #[error(transparent)]
    Numerics(NumericsError),
    #[error(transparent)]
    Array(#[from] ArrayError),
    #[error(transparent)]
    Pme(#[from] PmeError),
}

impl From<NumericsError> for DoaError {
    fn from(e: NumericsError) -> Self {
        match e {
            NumericsError::NotHermitian { .. } => DoaError::NonHermitian,
            other => DoaError::Numerics(other),
        }
    }
}

/// Signal and noise eigenvectors of a covariance.
#[derive(Debug, Clone)]
pub struct SubspaceSplit {
    pub signal: CMatrix,
    pub noise: CMatrix,
    /// Descending.
    pub eigenvalues: Vec<f64>,
}

/// Splits `r` into its `m`-dimensional signal subspace and the complement.
pub fn eig_split(r: &CovarianceMatrix, m: usize) -> Result<SubspaceSplit, DoaError> {
    let n = r.dim();
    if m >= n {
        return Err(DoaError::TooManySources { sources: m, dim: n });
    }
    let eig = herm_eig(r.as_matrix())?;
    Ok(SubspaceSplit {
        signal: eig.vectors.columns(0, m).into_owned(),
        noise: eig.vectors.columns(m, n - m).into_owned(),
        eigenvalues: eig.values,
    })
}

/// Unambiguous azimuth range of a manifold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldOfView {
    /// `(-90, 90)` degrees, open at both ends.
    Broadside,
    /// `(-180, 180]` degrees, periodic.
    Full,
}

impl FieldOfView {
    /// Grid points `lo + k * step` strictly inside the range (including +180
    /// for the periodic case).
    pub fn grid(&self, step: f64) -> Vec<f64> {
        match self {
            FieldOfView::Broadside => {
                let count = ((PI / step) - 1e-9).ceil() as usize;
                (1..count).map(|k| -FRAC_PI_2 + k as f64 * step).collect()
            }
            FieldOfView::Full => {
                let count = (2.0 * PI / step + 1e-9).floor() as usize;
                (1..=count).map(|k| -PI + k as f64 * step).collect()
            }
        }
    }

    fn wrap(&self, theta: f64) -> f64 {
        match self {
            FieldOfView::Broadside => theta.clamp(-FRAC_PI_2, FRAC_PI_2),
            FieldOfView::Full => wrap_angle(theta),
        }
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta.rem_euclid(2.0 * PI);
    if t > PI {
        t -= 2.0 * PI;
    }
    t
}

/// A parametric array response scanned by MUSIC.
pub trait Manifold {
    fn dim(&self) -> usize;
    fn response(&self, theta: f64) -> CVector;
    fn field_of_view(&self) -> FieldOfView;
}

impl Manifold for ArrayGeometry {
    fn dim(&self) -> usize {
        self.elements()
    }

    fn response(&self, theta: f64) -> CVector {
        self.steering(theta)
    }

    fn field_of_view(&self) -> FieldOfView {
        if self.is_ula() {
            FieldOfView::Broadside
        } else {
            FieldOfView::Full
        }
    }
}

/// Vandermonde response `[e^{j k theta}]_{k < len}` of a (sub)array of the
/// phase-mode virtual ULA, as seen after `Tv` mapping and smoothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VirtualUla {
    pub len: usize,
}

impl Manifold for VirtualUla {
    fn dim(&self) -> usize {
        self.len
    }

    fn response(&self, theta: f64) -> CVector {
        CVector::from_fn(self.len, |k, _| C64::from_polar(1.0, k as f64 * theta))
    }

    fn field_of_view(&self) -> FieldOfView {
        FieldOfView::Full
    }
}

/// Response of the virtual ULA after `Tw` (prewhitened) mapping.
#[derive(Debug, Clone, Copy)]
pub struct PrewhitenedVula<'a>(pub &'a PmeTransform);

impl Manifold for PrewhitenedVula<'_> {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn response(&self, theta: f64) -> CVector {
        self.0.ideal_steering(theta, true)
    }

    fn field_of_view(&self) -> FieldOfView {
        FieldOfView::Full
    }
}

/// MUSIC pseudo-spectrum on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    /// Radians, strictly increasing.
    pub grid: Vec<f64>,
    /// `10 log10 P(theta)`.
    pub power_db: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DoaMethod {
    Music,
    RootMusic,
    Esprit,
    UcaRootMusic,
    UcaEsprit,
}

/// Estimated azimuths, ascending, in radians.
#[derive(Debug, Clone, PartialEq)]
pub struct DoaEstimate {
    pub azimuths: Vec<f64>,
    pub method: DoaMethod,
}

impl DoaEstimate {
    fn new(mut azimuths: Vec<f64>, method: DoaMethod) -> Self {
        azimuths.sort_by(f64::total_cmp);
        Self { azimuths, method }
    }
}

fn check_sources(m: usize, capacity: usize) -> Result<(), DoaError> {
    if m == 0 {
        return Err(DoaError::TooFewSources);
    }
    if m > capacity {
        return Err(DoaError::TooManySources { sources: m, dim: capacity });
    }
    Ok(())
}

/// `a^H Vn Vn^H a / a^H a`, the reciprocal of the MUSIC spectrum.
fn music_denominator(noise: &CMatrix, a: &CVector) -> f64 {
    (noise.adjoint() * a).norm_squared() / a.norm_squared()
}

/// MUSIC settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MusicOptions {
    pub grid_step: f64,
    /// Refine each grid peak by golden-section search within one grid step.
    pub refine: bool,
}

impl Default for MusicOptions {
    fn default() -> Self {
        Self { grid_step: DEFAULT_GRID_STEP, refine: true }
    }
}

/// MUSIC with default refinement. See [`music_with`].
pub fn music<G: Manifold + ?Sized>(
    r: &CovarianceMatrix,
    manifold: &G,
    m: usize,
    grid_step: f64,
) -> Result<(Spectrum, DoaEstimate), DoaError> {
    music_with(r, manifold, m, &MusicOptions { grid_step, refine: true })
}

/// MUSIC spectrum and the `m` strongest strict local maxima.
///
/// Peaks are ranked by power, ties going to the smaller angle. On a periodic
/// field of view the grid wraps around.
pub fn music_with<G: Manifold + ?Sized>(
    r: &CovarianceMatrix,
    manifold: &G,
    m: usize,
    opts: &MusicOptions,
) -> Result<(Spectrum, DoaEstimate), DoaError> {
    if !(opts.grid_step > 0.0 && opts.grid_step.is_finite()) {
        return Err(DoaError::InvalidGridStep(opts.grid_step));
    }
    if r.dim() != manifold.dim() {
        return Err(DoaError::DimensionMismatch { expected: manifold.dim(), got: r.dim() });
    }
    check_sources(m, r.dim().saturating_sub(1))?;
    let split = eig_split(r, m)?;
    let fov = manifold.field_of_view();
    let grid = fov.grid(opts.grid_step);
    let denom: Vec<f64> = grid.iter().map(|&t| music_denominator(&split.noise, &manifold.response(t))).collect();
    let power_db: Vec<f64> = denom.iter().map(|&d| -10.0 * d.max(f64::MIN_POSITIVE).log10()).collect();

    let len = grid.len();
    let periodic = fov == FieldOfView::Full;
    let mut peaks: Vec<usize> = (0..len)
        .filter(|&i| {
            let (left, right) = if periodic {
                ((i + len - 1) % len, (i + 1) % len)
            } else if i == 0 || i + 1 == len {
                return false;
            } else {
                (i - 1, i + 1)
            };
            power_db[i] > power_db[left] && power_db[i] > power_db[right]
        })
        .collect();
    if peaks.len() < m {
        return Err(DoaError::NoPeaksFound { found: peaks.len(), requested: m });
    }
    peaks.sort_by(|&a, &b| power_db[b].total_cmp(&power_db[a]).then(grid[a].total_cmp(&grid[b])));
    peaks.truncate(m);

    let azimuths = peaks
        .iter()
        .map(|&i| {
            if opts.refine {
                let f = |t: f64| music_denominator(&split.noise, &manifold.response(t));
                let t = golden_section_min(f, grid[i] - opts.grid_step, grid[i] + opts.grid_step);
                if f(t) <= denom[i] {
                    fov.wrap(t)
                } else {
                    grid[i]
                }
            } else {
                grid[i]
            }
        })
        .collect();
    Ok((Spectrum { grid, power_db }, DoaEstimate::new(azimuths, DoaMethod::Music)))
}

fn golden_section_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - ratio * (hi - lo);
    let mut x2 = lo + ratio * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..200 {
        if hi - lo < 1e-13 {
            break;
        }
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - ratio * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + ratio * (hi - lo);
            f2 = f(x2);
        }
    }
    if f1 <= f2 {
        x1
    } else {
        x2
    }
}

/// Ascending coefficients of `Q(z) = sum_{p,q} z^{-p} C_pq z^q` times
/// `z^{n-1}`: coefficient `k + n - 1` collects the `k`-th diagonal of `C`.
pub fn diagonal_sum_polynomial(c: &CMatrix) -> Vec<C64> {
    let n = c.nrows();
    let mut coeffs = vec![C64::new(0.0, 0.0); 2 * n - 1];
    for p in 0..n {
        for q in 0..n {
            coeffs[q + n - 1 - p] += c[(p, q)];
        }
    }
    coeffs
}

/// The `m` roots inside (or numerically on) the unit circle with the largest
/// modulus, after merging numerically split double roots.
fn select_roots(roots: &[C64], m: usize) -> Result<Vec<C64>, DoaError> {
    let mut inside: Vec<C64> = roots.iter().copied().filter(|z| z.norm() <= 1.0 + UNIT_CIRCLE_SLACK).collect();
    inside.sort_by(|a, b| b.norm().total_cmp(&a.norm()));
    let mut chosen: Vec<C64> = Vec::with_capacity(m);
    for z in inside {
        if let Some(prev) = chosen.iter_mut().find(|c| (**c - z).norm() < DOUBLE_ROOT_MERGE) {
            *prev = (*prev + z) * 0.5;
            continue;
        }
        if chosen.len() < m {
            chosen.push(z);
        }
    }
    if chosen.len() < m {
        return Err(DoaError::RootSolveFailure(format!("only {} roots inside the unit circle", chosen.len())));
    }
    Ok(chosen)
}

fn polynomial_roots(c: &CMatrix) -> Result<Vec<C64>, DoaError> {
    poly_roots(&diagonal_sum_polynomial(c)).map_err(|e| DoaError::RootSolveFailure(e.to_string()))
}

fn ula_arcsin(phase: f64, g: &ArrayGeometry) -> Result<f64, DoaError> {
    let d = g.spacing().ok_or(DoaError::WrongGeometry { expected: "ULA" })?;
    // Steering phase is -phi per element, phi = 2 pi d sin(theta) / lambda.
    let s = -phase * g.wavelength() / (2.0 * PI * d);
    if s.abs() > 1.0 + 1e-12 {
        return Err(DoaError::ArcsinOutOfRange(s));
    }
    Ok(s.clamp(-1.0, 1.0).asin())
}

/// Root-MUSIC roots for a ULA covariance, before selection.
pub fn root_music_roots(r: &CovarianceMatrix, m: usize) -> Result<Vec<C64>, DoaError> {
    let split = eig_split(r, m)?;
    polynomial_roots(&(&split.noise * split.noise.adjoint()))
}

/// Root-MUSIC for a ULA.
pub fn root_music(r: &CovarianceMatrix, g: &ArrayGeometry, m: usize) -> Result<DoaEstimate, DoaError> {
    if !g.is_ula() {
        return Err(DoaError::WrongGeometry { expected: "ULA" });
    }
    if r.dim() != g.elements() {
        return Err(DoaError::DimensionMismatch { expected: g.elements(), got: r.dim() });
    }
    check_sources(m, g.elements() - 1)?;
    let roots = select_roots(&root_music_roots(r, m)?, m)?;
    let azimuths = roots.iter().map(|z| ula_arcsin(z.arg(), g)).collect::<Result<_, _>>()?;
    Ok(DoaEstimate::new(azimuths, DoaMethod::RootMusic))
}

/// Root-MUSIC on the prewhitened virtual ULA of a UCA covariance.
pub fn uca_root_music_cov(r: &CovarianceMatrix, t: &PmeTransform, m: usize) -> Result<DoaEstimate, DoaError> {
    check_sources(m, t.len() - 1)?;
    let rv = map_covariance(r, t, true)?;
    let split = eig_split(&rv, m)?;
    let w = t.whitener();
    let c = w * &split.noise * split.noise.adjoint() * w;
    let roots = select_roots(&polynomial_roots(&c)?, m)?;
    Ok(DoaEstimate::new(roots.iter().map(|z| z.arg()).collect(), DoaMethod::UcaRootMusic))
}

/// UCA-Root-MUSIC from element-space snapshots.
pub fn uca_root_music(x: &SnapshotMatrix, t: &PmeTransform, m: usize) -> Result<DoaEstimate, DoaError> {
    uca_root_music_cov(&sample_covariance(x), t, m)
}

/// Eigenvalues of the ESPRIT rotation operator for a shift-invariant subspace.
fn rotation_eigenvalues(signal: &CMatrix) -> Result<Vec<C64>, DoaError> {
    let (n, m) = signal.shape();
    let v1 = signal.rows(0, n - 1);
    let v2 = signal.rows(1, n - 1);
    let gram = v1.adjoint() * v1;
    let eig = herm_eig(&numerics::hermitian_part(&gram))?;
    let (max, min) = (eig.values[0], eig.values[m - 1]);
    if !(min > 1e-12 * max) {
        return Err(DoaError::RankDeficientSubspace);
    }
    let psi = gram.try_inverse().ok_or(DoaError::RankDeficientSubspace)? * (v1.adjoint() * v2);
    Ok(numerics::eigenvalues(&psi)?)
}

/// ESPRIT rotation eigenvalues for a ULA covariance.
pub fn esprit_eigenvalues(r: &CovarianceMatrix, m: usize) -> Result<Vec<C64>, DoaError> {
    rotation_eigenvalues(&eig_split(r, m)?.signal)
}

/// ESPRIT for a ULA from a covariance.
pub fn esprit_cov(r: &CovarianceMatrix, g: &ArrayGeometry, m: usize) -> Result<DoaEstimate, DoaError> {
    if !g.is_ula() {
        return Err(DoaError::WrongGeometry { expected: "ULA" });
    }
    if r.dim() != g.elements() {
        return Err(DoaError::DimensionMismatch { expected: g.elements(), got: r.dim() });
    }
    check_sources(m, g.elements().saturating_sub(2))?;
    let phi = esprit_eigenvalues(r, m)?;
    let azimuths = phi.iter().map(|z| ula_arcsin(z.arg(), g)).collect::<Result<_, _>>()?;
    Ok(DoaEstimate::new(azimuths, DoaMethod::Esprit))
}

/// ESPRIT for a ULA from snapshots.
pub fn esprit(x: &SnapshotMatrix, g: &ArrayGeometry, m: usize) -> Result<DoaEstimate, DoaError> {
    esprit_cov(&sample_covariance(x), g, m)
}

/// Unitary centro-Hermitian matrix built from identity and exchange blocks.
pub fn centro_hermitian_unitary(n: usize) -> CMatrix {
    let k = n / 2;
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let mut q = CMatrix::zeros(n, n);
    for i in 0..k {
        q[(i, i)] = C64::new(s, 0.0);
        q[(i, n - 1 - i)] = C64::new(0.0, s);
        q[(n - 1 - i, i)] = C64::new(s, 0.0);
        q[(n - 1 - i, n - 1 - i)] = C64::new(0.0, -s);
    }
    if n % 2 == 1 {
        q[(k, k)] = C64::new(1.0, 0.0);
    }
    q
}

/// UCA-ESPRIT on the (not prewhitened) virtual ULA of a UCA covariance.
///
/// The covariance is rotated by the centro-Hermitian unitary `Q` before the
/// eigendecomposition and the signal subspace rotated back, which leaves the
/// subspace unchanged.
pub fn uca_esprit_cov(r: &CovarianceMatrix, t: &PmeTransform, m: usize) -> Result<DoaEstimate, DoaError> {
    check_sources(m, t.len().saturating_sub(2))?;
    let rv = map_covariance(r, t, false)?;
    let q = centro_hermitian_unitary(t.len());
    let rotated = CovarianceMatrix::from_hermitian(numerics::hermitian_part(&(&q * rv.as_matrix() * q.adjoint())))?;
    let es = eig_split(&rotated, m)?.signal;
    let vs = q.adjoint() * es;
    let phi = rotation_eigenvalues(&vs)?;
    Ok(DoaEstimate::new(phi.iter().map(|z| z.arg()).collect(), DoaMethod::UcaEsprit))
}

/// UCA-ESPRIT from element-space snapshots.
pub fn uca_esprit(x: &SnapshotMatrix, t: &PmeTransform, m: usize) -> Result<DoaEstimate, DoaError> {
    uca_esprit_cov(&sample_covariance(x), t, m)
}

/// Largest absolute difference between two equally long sorted angle lists,
/// measured on the circle.
pub fn max_angle_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| wrap_angle(x - y).abs()).fold(0.0, f64::max)
}
