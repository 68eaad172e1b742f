//! Planar positions, anchor sets and the linear systems used for trilateration.
//!
//! Range-based localization linearizes the circle equations
//! `|p - p_i|^2 = D_i^2` by subtracting the equation of a reference anchor.
//! The last anchor is the reference here, so an `S`-anchor set yields `S - 1`
//! rows:
//!
//! ```text
//! (x_S - x_i) x + (y_S - y_i) y = 1/2 (|p_S|^2 - |p_i|^2 + D_i^2 - D_S^2)
//! ```

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use std::ops::{Add, Mul, Sub};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("need at least {required} anchors, got {got}")]
    TooFewAnchors { required: usize, got: usize },
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("distance {0} is not a positive finite number")]
    NonPositiveDistance(f64),
    #[error("position is not finite")]
    NonFinite,
    #[error("anchors {0} and {1} coincide")]
    DuplicateAnchor(usize, usize),
    #[error("anchors are collinear; the position is not identifiable")]
    CollinearAnchors,
    #[error("bearing lines are parallel; no unique intersection")]
    ParallelBearings,
}

/// A point in the plane, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Position2D {
    pub x: f64,
    pub y: f64,
}

impl Position2D {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// Unit vector at `azimuth` radians, counter-clockwise from +x.
    pub fn from_polar(radius: f64, azimuth: f64) -> Self {
        Self::new(radius * azimuth.cos(), radius * azimuth.sin())
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn norm_sqr(self) -> f64 {
        self.x * self.x + self.y * self.y
    }

    pub fn dot(self, other: Self) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// Azimuth of `other` seen from `self`, radians in `(-pi, pi]`.
    pub fn bearing_to(self, other: Self) -> f64 {
        let d = other - self;
        d.y.atan2(d.x)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Arithmetic mean of a non-empty slice of points.
    pub fn centroid(points: &[Self]) -> Option<Self> {
        if points.is_empty() {
            return None;
        }
        let sum = points.iter().fold(Self::default(), |acc, &p| acc + p);
        Some(sum * (1.0 / points.len() as f64))
    }
}

impl From<[f64; 2]> for Position2D {
    fn from(v: [f64; 2]) -> Self {
        Self::new(v[0], v[1])
    }
}

impl From<Position2D> for [f64; 2] {
    fn from(p: Position2D) -> Self {
        [p.x, p.y]
    }
}

impl Add for Position2D {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Position2D {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Self::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Position2D {
    type Output = Self;
    fn mul(self, rhs: f64) -> Self {
        Self::new(self.x * rhs, self.y * rhs)
    }
}

pub fn distance(a: Position2D, b: Position2D) -> f64 {
    (a - b).norm()
}

/// Anchors with known positions. Construction rejects non-finite and
/// coincident positions; the last anchor is the differencing reference.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet(Vec<Position2D>);

impl AnchorSet {
    pub fn new(positions: Vec<Position2D>) -> Result<Self, GeometryError> {
        if positions.iter().any(|p| !p.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        for i in 0..positions.len() {
            for k in i + 1..positions.len() {
                if distance(positions[i], positions[k]) == 0.0 {
                    return Err(GeometryError::DuplicateAnchor(i, k));
                }
            }
        }
        Ok(Self(positions))
    }

    pub fn positions(&self) -> &[Position2D] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// True distances from every anchor to `p`.
    pub fn distances_to(&self, p: Position2D) -> Vec<f64> {
        self.0.iter().map(|&a| distance(a, p)).collect()
    }

    /// A new set with `extra` appended, which becomes the reference anchor.
    pub fn with_anchor(&self, extra: Position2D) -> Result<Self, GeometryError> {
        let mut positions = self.0.clone();
        positions.push(extra);
        Self::new(positions)
    }
}

/// An overdetermined system `A p = b` with two unknowns.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl LinearSystem {
    pub fn rows(&self) -> usize {
        self.a.nrows()
    }

    /// `A p - b`.
    pub fn residual(&self, p: Position2D) -> DVector<f64> {
        &self.a * DVector::from_vec(vec![p.x, p.y]) - &self.b
    }
}

/// `det(A^T A)` relative to `trace(A^T A)^2`; zero for rank-deficient `A`.
fn normalized_gram_det(a: &DMatrix<f64>) -> f64 {
    let g = a.transpose() * a;
    let trace = g[(0, 0)] + g[(1, 1)];
    if trace == 0.0 {
        return 0.0;
    }
    (g[(0, 0)] * g[(1, 1)] - g[(0, 1)] * g[(1, 0)]) / (trace * trace)
}

const RANK_TOL: f64 = 1e-12;

/// Builds the linearized trilateration system, differencing against the last anchor.
pub fn build_lop_system(anchors: &AnchorSet, distances: &[f64]) -> Result<LinearSystem, GeometryError> {
    let s = anchors.len();
    if s < 3 {
        return Err(GeometryError::TooFewAnchors { required: 3, got: s });
    }
    if distances.len() != s {
        return Err(GeometryError::LengthMismatch { expected: s, got: distances.len() });
    }
    if let Some(&d) = distances.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
        return Err(GeometryError::NonPositiveDistance(d));
    }
    let p = anchors.positions();
    let reference = p[s - 1];
    let d_ref = distances[s - 1];
    let rows = s - 1;
    let a = DMatrix::from_fn(rows, 2, |i, col| {
        if col == 0 {
            reference.x - p[i].x
        } else {
            reference.y - p[i].y
        }
    });
    let b = DVector::from_fn(rows, |i, _| {
        0.5 * (reference.norm_sqr() - p[i].norm_sqr() + distances[i] * distances[i] - d_ref * d_ref)
    });
    if normalized_gram_det(&a) < RANK_TOL {
        return Err(GeometryError::CollinearAnchors);
    }
    Ok(LinearSystem { a, b })
}

/// Least-squares intersection of bearing lines.
///
/// Anchor `i` observes the node at azimuth `theta_i`, so the node lies on
/// `sin(theta_i) x - cos(theta_i) y = sin(theta_i) x_i - cos(theta_i) y_i`.
pub fn bearing_lines_locate(anchors: &AnchorSet, azimuths: &[f64]) -> Result<Position2D, GeometryError> {
    let s = anchors.len();
    if s < 2 {
        return Err(GeometryError::TooFewAnchors { required: 2, got: s });
    }
    if azimuths.len() != s {
        return Err(GeometryError::LengthMismatch { expected: s, got: azimuths.len() });
    }
    let mut g = Matrix2::zeros();
    let mut h = Vector2::zeros();
    for (p, &theta) in anchors.positions().iter().zip(azimuths) {
        let row = Vector2::new(theta.sin(), -theta.cos());
        let rhs = theta.sin() * p.x - theta.cos() * p.y;
        g += row * row.transpose();
        h += row * rhs;
    }
    let trace = g.trace();
    if !(trace > 0.0) || g.determinant() / (trace * trace) < RANK_TOL {
        return Err(GeometryError::ParallelBearings);
    }
    let sol = g.try_inverse().ok_or(GeometryError::ParallelBearings)? * h;
    Ok(Position2D::new(sol[0], sol[1]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn anchors(points: &[(f64, f64)]) -> AnchorSet {
        AnchorSet::new(points.iter().map(|&(x, y)| Position2D::new(x, y)).collect()).unwrap()
    }

    #[test]
    fn lop_system_for_square_anchors() {
        let set = anchors(&[(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)]);
        let node = Position2D::new(3.0, 4.0);
        let sys = build_lop_system(&set, &set.distances_to(node)).unwrap();
        assert_eq!(sys.rows(), 2);
        // Rows: (0-0, 10-0) and (0-10, 10-0)
        assert_eq!(sys.a[(0, 0)], 0.0);
        assert_eq!(sys.a[(0, 1)], 10.0);
        assert_eq!(sys.a[(1, 0)], -10.0);
        assert_eq!(sys.a[(1, 1)], 10.0);
        assert!(sys.residual(node).norm() < 1e-12);
    }

    #[test]
    fn lop_rejects_collinear_and_short_input() {
        let set = anchors(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]);
        assert_eq!(build_lop_system(&set, &[1.0, 1.0, 1.0]), Err(GeometryError::CollinearAnchors));
        let set = anchors(&[(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)]);
        assert!(matches!(build_lop_system(&set, &[1.0, 1.0]), Err(GeometryError::LengthMismatch { .. })));
        assert!(matches!(build_lop_system(&set, &[1.0, -1.0, 1.0]), Err(GeometryError::NonPositiveDistance(_))));
        let two = anchors(&[(0.0, 0.0), (1.0, 0.0)]);
        assert!(matches!(build_lop_system(&two, &[1.0, 1.0]), Err(GeometryError::TooFewAnchors { .. })));
    }

    #[test]
    fn anchor_set_rejects_duplicates() {
        let err = AnchorSet::new(vec![Position2D::new(1.0, 1.0), Position2D::new(1.0, 1.0)]).unwrap_err();
        assert_eq!(err, GeometryError::DuplicateAnchor(0, 1));
    }

    #[test]
    fn two_bearings_intersect_at_node() {
        let set = anchors(&[(0.0, 10.0), (10.0, 10.0)]);
        let node = Position2D::new(5.0, 0.0);
        let az: Vec<f64> = set.positions().iter().map(|a| a.bearing_to(node)).collect();
        let p = bearing_lines_locate(&set, &az).unwrap();
        assert_abs_diff_eq!(p.x, 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.y, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn parallel_bearings_are_rejected() {
        let set = anchors(&[(0.0, 0.0), (0.0, 5.0)]);
        let az = [0.3, 0.3];
        assert_eq!(bearing_lines_locate(&set, &az), Err(GeometryError::ParallelBearings));
    }

    proptest! {
        #[test]
        fn noiseless_lop_residual_vanishes(
            pts in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 3..8),
            node in (-50.0f64..50.0, -50.0f64..50.0),
        ) {
            let Ok(set) = AnchorSet::new(pts.iter().map(|&(x, y)| Position2D::new(x, y)).collect()) else {
                return Ok(());
            };
            let node = Position2D::new(node.0, node.1);
            let d = set.distances_to(node);
            prop_assume!(d.iter().all(|&v| v > 1e-6));
            if let Ok(sys) = build_lop_system(&set, &d) {
                let scale = sys.b.amax().max(1.0);
                prop_assert!(sys.residual(node).amax() <= 1e-9 * scale);
            }
        }

        #[test]
        fn bearings_recover_node(
            pts in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 2..6),
            node in (-50.0f64..50.0, -50.0f64..50.0),
        ) {
            let Ok(set) = AnchorSet::new(pts.iter().map(|&(x, y)| Position2D::new(x, y)).collect()) else {
                return Ok(());
            };
            let node = Position2D::new(node.0, node.1);
            prop_assume!(set.positions().iter().all(|&a| distance(a, node) > 1.0));
            let az: Vec<f64> = set.positions().iter().map(|a| a.bearing_to(node)).collect();
            let spread = az.iter().flat_map(|a| az.iter().map(move |b| (a - b).sin().abs())).fold(0.0, f64::max);
            prop_assume!(spread > 0.05);
            if let Ok(p) = bearing_lines_locate(&set, &az) {
                prop_assert!(distance(p, node) < 1e-6);
            }
        }
    }
}
