//! RSS and DOA fusion.
//!
//! Four schemes combine range and bearing information:
//!
//! * [`hybrid_single_node`]: one node carrying a circular array. Each element
//!   contributes a range circle, the DOA contributes a ray from the array
//!   center, and the ray-circle intersections are averaged.
//! * [`hybrid_with_fbss`]: the same fusion with the bearing estimated under
//!   coherent multipath, via phase-mode mapping, FBSS and MUSIC.
//! * [`hybrid_anchor_fusion`]: trilateration (LS or WLS) over plain RSS
//!   anchors plus the hybrid node, averaged with the point on the DOA ray at
//!   the same range.
//! * [`two_lines`]: intersection of one RSS line of position with the bearing
//!   line.

use crate::array::{sample_covariance, ArrayError, ArrayGeometry, CovarianceMatrix, SnapshotMatrix};
use crate::channel::{ChannelModel, RssMeasurement};
use crate::decorrelation::{fbss, DecorrelationError, SmoothingPlan};
use crate::doa::{music, wrap_angle, DoaError, FieldOfView, Manifold, VirtualUla, DEFAULT_GRID_STEP};
use crate::numerics::{hermitian_part, inv_sqrt_psd, CMatrix, CVector};
use crate::geometry::{distance, AnchorSet, GeometryError, Position2D};
use crate::pme::{map_covariance, PmeError, PmeTransform};
use crate::rss::{locate, RssError, RssEstimator};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HybridError {
    #[error("circle radius {0} must be positive and finite")]
    InvalidRadius(f64),
    #[error("the circle lies behind the ray origin")]
    BehindRay,
    #[error("no element circle intersects the bearing ray")]
    AllIntersectionsFailed,
    #[error("bearing line is parallel to the line of position")]
    SingularFusionMatrix,
    #[error("expected {expected} measurements, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("at least {required} RSS anchors are required, got {got}")]
    TooFewAnchors { required: usize, got: usize },
    #[error("direction vector must be finite and nonzero")]
    InvalidDirection,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Rss(#[from] RssError),
    #[error(transparent)]
    Doa(#[from] DoaError),
    #[error(transparent)]
    Decorrelation(#[from] DecorrelationError),
    #[error(transparent)]
    Pme(#[from] PmeError),
    #[error(transparent)]
    Array(#[from] ArrayError),
}

/// A node with a known position, a UCA and per-element RSS capability.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridNode {
    center: Position2D,
    geometry: ArrayGeometry,
    element_positions: Vec<Position2D>,
}

impl HybridNode {
    pub fn new(center: Position2D, geometry: ArrayGeometry) -> Result<Self, HybridError> {
        if !center.is_finite() {
            return Err(GeometryError::NonFinite.into());
        }
        let element_positions = geometry.element_offsets()?.into_iter().map(|o| center + o).collect();
        Ok(Self { center, geometry, element_positions })
    }

    pub fn center(&self) -> Position2D {
        self.center
    }

    pub fn geometry(&self) -> &ArrayGeometry {
        &self.geometry
    }

    pub fn element_positions(&self) -> &[Position2D] {
        &self.element_positions
    }

    /// A copy moved by `v`.
    pub fn translated(&self, v: Position2D) -> Self {
        Self {
            center: self.center + v,
            geometry: self.geometry.clone(),
            element_positions: self.element_positions.iter().map(|&p| p + v).collect(),
        }
    }

    /// Range seen by the node as a whole: the mean of the element estimates.
    pub fn mean_distance(measurements: &[RssMeasurement]) -> f64 {
        measurements.iter().map(|m| m.est_distance).sum::<f64>() / measurements.len() as f64
    }

    /// Range from the center implied by the element ranges along `doa`.
    /// Unlike [`Self::mean_distance`] it is exact for exact inputs.
    pub fn center_range(&self, doa: f64, element_rss: &[RssMeasurement]) -> Result<f64, HybridError> {
        Ok(distance(self.center, hybrid_single_node(self, doa, element_rss)?))
    }
}

/// Half-line `origin + t * direction`, `t >= 0`, with a unit direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BearingRay {
    origin: Position2D,
    direction: Position2D,
}

impl BearingRay {
    pub fn new(origin: Position2D, direction: Position2D) -> Result<Self, HybridError> {
        let n = direction.norm();
        if !(n > 0.0 && n.is_finite()) || !origin.is_finite() {
            return Err(HybridError::InvalidDirection);
        }
        Ok(Self { origin, direction: direction * (1.0 / n) })
    }

    pub fn from_azimuth(origin: Position2D, azimuth: f64) -> Result<Self, HybridError> {
        Self::new(origin, Position2D::from_polar(1.0, azimuth))
    }

    pub fn origin(&self) -> Position2D {
        self.origin
    }

    pub fn direction(&self) -> Position2D {
        self.direction
    }

    pub fn at(&self, t: f64) -> Position2D {
        self.origin + self.direction * t
    }
}

/// First point where `ray` meets the circle, or the ray point closest to the
/// circle center when they do not meet.
pub fn ray_circle_point(ray: &BearingRay, center: Position2D, radius: f64) -> Result<Position2D, HybridError> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(HybridError::InvalidRadius(radius));
    }
    // t^2 + 2 b t + c = 0 for a unit direction.
    let rel = ray.origin - center;
    let b = ray.direction.dot(rel);
    let c = rel.norm_sqr() - radius * radius;
    let disc = b * b - c;
    if disc >= 0.0 {
        let s = disc.sqrt();
        let (t1, t2) = (-b - s, -b + s);
        return match (t1 > 0.0, t2 > 0.0) {
            (true, _) => Ok(ray.at(t1)),
            (false, true) => Ok(ray.at(t2)),
            _ => Err(HybridError::BehindRay),
        };
    }
    let t = -b;
    if t > 0.0 {
        Ok(ray.at(t))
    } else {
        Err(HybridError::BehindRay)
    }
}

/// Averages the intersections of the DOA ray from the node center with every
/// element's range circle. Elements whose circle cannot be used are skipped.
pub fn hybrid_single_node(
    node: &HybridNode,
    doa: f64,
    element_rss: &[RssMeasurement],
) -> Result<Position2D, HybridError> {
    let n = node.element_positions.len();
    if element_rss.len() != n {
        return Err(HybridError::LengthMismatch { expected: n, got: element_rss.len() });
    }
    let ray = BearingRay::from_azimuth(node.center, doa)?;
    let points: Vec<Position2D> = node
        .element_positions
        .iter()
        .zip(element_rss)
        .filter_map(|(&e, m)| ray_circle_point(&ray, e, m.est_distance).ok())
        .collect();
    Position2D::centroid(&points).ok_or(HybridError::AllIntersectionsFailed)
}

/// The estimated azimuth closest to `hint` on the circle, or the first one
/// when there is no hint.
pub fn nearest_bearing(azimuths: &[f64], hint: Option<f64>) -> Option<f64> {
    match hint {
        None => azimuths.first().copied(),
        Some(h) => azimuths.iter().copied().min_by(|a, b| wrap_angle(a - h).abs().total_cmp(&wrap_angle(b - h).abs())),
    }
}

/// Picks the candidate bearing whose single-node fix best agrees with the
/// anchor range estimates, scored by squared log-range misfit. Candidates
/// that give no fix are skipped; without anchors the first candidate wins.
pub fn most_consistent_bearing(
    node: &HybridNode,
    candidates: &[f64],
    element_rss: &[RssMeasurement],
    anchors: &[Position2D],
    anchor_distances: &[f64],
) -> Option<f64> {
    if anchors.is_empty() || anchors.len() != anchor_distances.len() {
        return candidates.first().copied();
    }
    let misfit = |p: Position2D| -> f64 {
        anchors
            .iter()
            .zip(anchor_distances)
            .map(|(&a, &d)| (d.ln() - distance(p, a).max(f64::MIN_POSITIVE).ln()).powi(2))
            .sum()
    };
    candidates
        .iter()
        .filter_map(|&b| hybrid_single_node(node, b, element_rss).ok().map(|p| (b, misfit(p))))
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .map(|(b, _)| b)
}

/// MUSIC manifold of the whitened, smoothed virtual subarray: `W a(theta)`.
struct WhitenedSubarray {
    whitener: CMatrix,
    inner: VirtualUla,
}

impl Manifold for WhitenedSubarray {
    fn dim(&self) -> usize {
        self.inner.len
    }

    fn response(&self, theta: f64) -> CVector {
        &self.whitener * self.inner.response(theta)
    }

    fn field_of_view(&self) -> FieldOfView {
        FieldOfView::Full
    }
}

/// Bearing estimation for coherent multipath: phase-mode mapping to the
/// virtual ULA with `Tv`, FBSS with subarrays of `subarray_len` (default
/// `M + 1`), and MUSIC. Returns all `m` estimated azimuths.
///
/// `Tv` colors white element noise by `Tv Tv^H`. The same smoothing is applied
/// to that matrix and its inverse square root whitens the smoothed covariance
/// and the manifold before MUSIC.
pub fn fbss_bearings(
    x: &SnapshotMatrix,
    pme: &PmeTransform,
    m: usize,
    subarray_len: Option<usize>,
) -> Result<Vec<f64>, HybridError> {
    let rv = map_covariance(&sample_covariance(x), pme, false)?;
    let plan = SmoothingPlan::new(rv.dim(), subarray_len.unwrap_or(m + 1), m)?;
    let smoothed = fbss(&rv, &plan)?;
    let noise = CovarianceMatrix::from_hermitian(hermitian_part(&(pme.tv() * pme.tv().adjoint())))?;
    let whitener = inv_sqrt_psd(fbss(&noise, &plan)?.as_matrix()).map_err(DoaError::from)?;
    let rw = CovarianceMatrix::from_hermitian(hermitian_part(&(&whitener * smoothed.as_matrix() * &whitener)))?;
    let manifold = WhitenedSubarray { whitener, inner: VirtualUla { len: plan.subarray_len() } };
    let (_, est) = music(&rw, &manifold, m, DEFAULT_GRID_STEP)?;
    Ok(est.azimuths)
}

/// Single-node fusion with the bearing recovered by [`fbss_bearings`]. Of the
/// `m` paths, the one nearest `bearing_hint` is taken as the direct path.
/// Returns the position and the bearing used.
pub fn hybrid_with_fbss(
    node: &HybridNode,
    x: &SnapshotMatrix,
    element_rss: &[RssMeasurement],
    pme: &PmeTransform,
    m: usize,
    subarray_len: Option<usize>,
    bearing_hint: Option<f64>,
) -> Result<(Position2D, f64), HybridError> {
    let bearings = fbss_bearings(x, pme, m, subarray_len)?;
    let doa = nearest_bearing(&bearings, bearing_hint).ok_or(DoaError::NoPeaksFound { found: 0, requested: m })?;
    Ok((hybrid_single_node(node, doa, element_rss)?, doa))
}

/// Trilateration estimator used by [`hybrid_anchor_fusion`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionEstimator {
    Ls,
    Wls,
}

/// Midpoint of `p_rss` and the point at the same range from `center` along
/// the bearing `doa`.
pub fn fuse_with_bearing(center: Position2D, p_rss: Position2D, doa: f64) -> Position2D {
    let r = distance(center, p_rss);
    let p_doa = center + Position2D::from_polar(r, doa);
    (p_rss + p_doa) * 0.5
}

/// Trilateration over `rss_anchors` plus the hybrid node (as reference),
/// fused with the DOA ray.
pub fn hybrid_anchor_fusion(
    node: &HybridNode,
    rss_anchors: &AnchorSet,
    anchor_distances: &[f64],
    hybrid_distance: f64,
    model: &ChannelModel,
    estimator: FusionEstimator,
    doa: f64,
) -> Result<Position2D, HybridError> {
    if rss_anchors.len() < 2 {
        return Err(HybridError::TooFewAnchors { required: 2, got: rss_anchors.len() });
    }
    if anchor_distances.len() != rss_anchors.len() {
        return Err(HybridError::LengthMismatch { expected: rss_anchors.len(), got: anchor_distances.len() });
    }
    let anchors = rss_anchors.with_anchor(node.center)?;
    let mut d = anchor_distances.to_vec();
    d.push(hybrid_distance);
    let est = match estimator {
        FusionEstimator::Ls => RssEstimator::Ls,
        FusionEstimator::Wls => RssEstimator::Wls,
    };
    let p = locate(&anchors, &d, model, est)?.position;
    Ok(fuse_with_bearing(node.center, p, doa))
}

/// Intersection of the line of position between `rss_anchor` and the hybrid
/// node with the bearing line through the hybrid node.
pub fn two_lines(
    hybrid_center: Position2D,
    rss_anchor: Position2D,
    d1: f64,
    d_hyb: f64,
    doa: f64,
) -> Result<Position2D, HybridError> {
    let (s, c) = doa.sin_cos();
    let (a11, a12) = (hybrid_center.x - rss_anchor.x, hybrid_center.y - rss_anchor.y);
    let (a21, a22) = (s, -c);
    let b1 = 0.5 * (hybrid_center.norm_sqr() - rss_anchor.norm_sqr() + d1 * d1 - d_hyb * d_hyb);
    let b2 = s * hybrid_center.x - c * hybrid_center.y;
    let det = a11 * a22 - a12 * a21;
    let scale = (a11 * a11 + a12 * a12 + a21 * a21 + a22 * a22).sqrt();
    if !(det.abs() >= 1e-12 * scale) {
        return Err(HybridError::SingularFusionMatrix);
    }
    Ok(Position2D::new((b1 * a22 - a12 * b2) / det, (a11 * b2 - a21 * b1) / det))
}
