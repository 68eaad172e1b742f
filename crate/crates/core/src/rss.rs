//! Trilateration estimators over the linearized range system `A p = b`.
//!
//! * LS: `(A^T A)^{-1} A^T b`.
//! * WLS: `(A^T W A)^{-1} A^T W b` with `W` the inverse covariance of `b`
//!   under log-normal distance errors.
//! * Huber/IRLS: iteratively reweighted least squares towards the l1 fit,
//!   started from the WLS solution.

use crate::channel::{ChannelModel, RssMeasurement};
use crate::geometry::{build_lop_system, AnchorSet, GeometryError, LinearSystem, Position2D};
use nalgebra::{DMatrix, Matrix2, Vector2};
use thiserror::Error;

/// Largest condition number of the normal matrix accepted by the solvers.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RssError {
    #[error("normal matrix is numerically singular (condition {condition:.3e})")]
    SingularSystem { condition: f64 },
    #[error("distance variances are degenerate")]
    DegenerateVariance,
    #[error("weight matrix is not symmetric positive definite")]
    NotPositiveDefinite,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid IRLS parameter {name} = {value}")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Symmetric positive-definite row weights for the linear system.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix(DMatrix<f64>);

impl WeightMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self, RssError> {
        if m.nrows() != m.ncols() {
            return Err(RssError::DimensionMismatch { expected: m.nrows(), got: m.ncols() });
        }
        let scale = m.amax().max(f64::MIN_POSITIVE);
        if (&m - m.transpose()).amax() > 1e-10 * scale || m.iter().any(|v| !v.is_finite()) {
            return Err(RssError::NotPositiveDefinite);
        }
        if m.clone().cholesky().is_none() {
            return Err(RssError::NotPositiveDefinite);
        }
        Ok(Self(m))
    }

    pub fn identity(n: usize) -> Self {
        Self(DMatrix::identity(n, n))
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }
}

/// Outcome of an estimator run.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorReport {
    pub position: Position2D,
    /// 1 for the closed forms; number of reweighted solves for IRLS.
    pub iterations: usize,
    /// `|A p - b|_2` at the returned position.
    pub final_residual_norm: f64,
    /// False when IRLS stopped at `max_iter` without meeting `tol`.
    pub converged: bool,
    /// Smoothed l1 objective of the whitened residual after each iterate,
    /// initial point first. See [`smoothed_l1`].
    pub objective_trace: Vec<f64>,
}

impl EstimatorReport {
    fn closed_form(sys: &LinearSystem, position: Position2D) -> Self {
        let r = sys.residual(position);
        Self {
            position,
            iterations: 1,
            final_residual_norm: r.norm(),
            converged: true,
            objective_trace: vec![smoothed_l1(r.as_slice(), 0.0)],
        }
    }
}

fn solve_normal(g: Matrix2<f64>, h: Vector2<f64>) -> Result<Position2D, RssError> {
    // Eigenvalues of the symmetric 2x2 normal matrix.
    let mean = 0.5 * (g[(0, 0)] + g[(1, 1)]);
    let diff = 0.5 * (g[(0, 0)] - g[(1, 1)]);
    let radius = diff.hypot(0.5 * (g[(0, 1)] + g[(1, 0)]));
    let (hi, lo) = (mean + radius, mean - radius);
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(RssError::SingularSystem { condition });
    }
    let inv = g.try_inverse().ok_or(RssError::SingularSystem { condition })?;
    let p = inv * h;
    Ok(Position2D::new(p[0], p[1]))
}

fn check_columns(sys: &LinearSystem) -> Result<(), RssError> {
    if sys.a.ncols() != 2 {
        return Err(RssError::DimensionMismatch { expected: 2, got: sys.a.ncols() });
    }
    if sys.b.len() != sys.a.nrows() {
        return Err(RssError::DimensionMismatch { expected: sys.a.nrows(), got: sys.b.len() });
    }
    Ok(())
}

fn weighted_normal(sys: &LinearSystem, w: &DMatrix<f64>) -> (Matrix2<f64>, Vector2<f64>) {
    let at_w = sys.a.transpose() * w;
    let g = &at_w * &sys.a;
    let h = &at_w * &sys.b;
    (Matrix2::new(g[(0, 0)], g[(0, 1)], g[(1, 0)], g[(1, 1)]), Vector2::new(h[0], h[1]))
}

fn diag_normal(sys: &LinearSystem, w: &[f64]) -> (Matrix2<f64>, Vector2<f64>) {
    let mut g = Matrix2::zeros();
    let mut h = Vector2::zeros();
    for (i, &wi) in w.iter().enumerate() {
        let row = Vector2::new(sys.a[(i, 0)], sys.a[(i, 1)]);
        g += row * row.transpose() * wi;
        h += row * (wi * sys.b[i]);
    }
    (g, h)
}

/// Ordinary least squares.
pub fn ls_solve(sys: &LinearSystem) -> Result<Position2D, RssError> {
    check_columns(sys)?;
    let ones = vec![1.0; sys.rows()];
    let (g, h) = diag_normal(sys, &ones);
    solve_normal(g, h)
}

/// Inverse covariance of the right-hand side `b` for log-normal distance
/// estimates, with the last anchor as differencing reference:
///
/// ```text
/// S = 1/4 (diag(V_1, ..., V_{S-1}) + V_S 1 1^T),   V_i = Var(d_i^2)
/// ```
///
/// With zero shadowing every variance vanishes and the identity is returned.
pub fn wls_weights(model: &ChannelModel, est_distances: &[f64]) -> Result<WeightMatrix, RssError> {
    let s = est_distances.len();
    if s < 2 {
        return Err(RssError::DimensionMismatch { expected: 2, got: s });
    }
    if let Some(&d) = est_distances.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
        return Err(GeometryError::NonPositiveDistance(d).into());
    }
    let rows = s - 1;
    if model.sigma_db() == 0.0 {
        return Ok(WeightMatrix::identity(rows));
    }
    let var: Vec<f64> = est_distances.iter().map(|&d| model.squared_distance_variance(d)).collect();
    if var.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(RssError::DegenerateVariance);
    }
    let reference = var[s - 1];
    let cov = DMatrix::from_fn(rows, rows, |i, k| 0.25 * (reference + if i == k { var[i] } else { 0.0 }));
    let w = cov.cholesky().ok_or(RssError::DegenerateVariance)?.inverse();
    WeightMatrix::new(hermitize(w))
}

fn hermitize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Weighted least squares.
pub fn wls_solve(sys: &LinearSystem, w: &WeightMatrix) -> Result<Position2D, RssError> {
    check_columns(sys)?;
    if w.dim() != sys.rows() {
        return Err(RssError::DimensionMismatch { expected: sys.rows(), got: w.dim() });
    }
    let (g, h) = weighted_normal(sys, w.as_matrix());
    solve_normal(g, h)
}

/// `sum_i |e_i| - epsilon ln(1 + |e_i| / epsilon)`.
///
/// This is the function the reweighting `1 / (|e_i| + epsilon)` majorizes, so
/// it never increases across IRLS iterations. It differs from `sum_i |e_i|`
/// by at most `epsilon ln(1 + |e_i| / epsilon)` per row.
pub fn smoothed_l1(residual: &[f64], epsilon: f64) -> f64 {
    residual
        .iter()
        .map(|e| {
            let a = e.abs();
            if epsilon > 0.0 {
                a - epsilon * (a / epsilon).ln_1p()
            } else {
                a
            }
        })
        .sum()
}

/// IRLS settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HuberConfig {
    /// Smoothing added to `|e_i|` in the row weights.
    pub epsilon: f64,
    pub max_iter: usize,
    /// Stop once the position moves less than this many meters.
    pub tol: f64,
}

impl Default for HuberConfig {
    fn default() -> Self {
        Self { epsilon: 1e-3, max_iter: 50, tol: 1e-6 }
    }
}

/// Iteratively reweighted least squares for the l1 fit of `A p = b`.
///
/// The rows are first whitened with the Cholesky factor of `weights`
/// (`W = L L^T`, rows `L^T A`, `L^T b`), so the first iterate is exactly the
/// WLS solution and correlated rows do not bias the l1 fit. Each further step
/// solves a diagonal weighted problem on the whitened residuals `e` with
/// `w_i = 1 / (|e_i| + epsilon)`. Pass the identity for the unweighted fit.
pub fn huber_irls(sys: &LinearSystem, weights: &WeightMatrix, cfg: &HuberConfig) -> Result<EstimatorReport, RssError> {
    if !(cfg.epsilon > 0.0 && cfg.epsilon.is_finite()) {
        return Err(RssError::InvalidParameter { name: "epsilon", value: cfg.epsilon });
    }
    if cfg.max_iter == 0 {
        return Err(RssError::InvalidParameter { name: "max_iter", value: 0.0 });
    }
    if !(cfg.tol >= 0.0) {
        return Err(RssError::InvalidParameter { name: "tol", value: cfg.tol });
    }
    check_columns(sys)?;
    if weights.dim() != sys.rows() {
        return Err(RssError::DimensionMismatch { expected: sys.rows(), got: weights.dim() });
    }
    let lt = weights
        .as_matrix()
        .clone()
        .cholesky()
        .ok_or(RssError::NotPositiveDefinite)?
        .l()
        .transpose();
    let white = LinearSystem { a: &lt * &sys.a, b: &lt * &sys.b };

    let mut p = ls_solve(&white)?;
    let mut residual = white.residual(p);
    let mut trace = vec![smoothed_l1(residual.as_slice(), cfg.epsilon)];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iter {
        iterations += 1;
        let w: Vec<f64> = residual.iter().map(|e| 1.0 / (e.abs() + cfg.epsilon)).collect();
        let (g, h) = diag_normal(&white, &w);
        let next = solve_normal(g, h)?;
        let step = (next - p).norm();
        p = next;
        residual = white.residual(p);
        trace.push(smoothed_l1(residual.as_slice(), cfg.epsilon));
        if step < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(EstimatorReport {
        position: p,
        iterations,
        final_residual_norm: sys.residual(p).norm(),
        converged,
        objective_trace: trace,
    })
}

/// Selects one of the trilateration estimators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RssEstimator {
    Ls,
    Wls,
    Huber(HuberConfig),
}

/// Builds the linear system from distance estimates and runs `estimator`.
/// `model` supplies the variances for the weighted variants.
pub fn locate(
    anchors: &AnchorSet,
    est_distances: &[f64],
    model: &ChannelModel,
    estimator: RssEstimator,
) -> Result<EstimatorReport, RssError> {
    let sys = build_lop_system(anchors, est_distances)?;
    match estimator {
        RssEstimator::Ls => Ok(EstimatorReport::closed_form(&sys, ls_solve(&sys)?)),
        RssEstimator::Wls => {
            let w = wls_weights(model, est_distances)?;
            Ok(EstimatorReport::closed_form(&sys, wls_solve(&sys, &w)?))
        }
        RssEstimator::Huber(cfg) => huber_irls(&sys, &wls_weights(model, est_distances)?, &cfg),
    }
}

/// Convenience wrapper taking measurements instead of bare distances.
pub fn locate_measurements(
    anchors: &AnchorSet,
    measurements: &[RssMeasurement],
    model: &ChannelModel,
    estimator: RssEstimator,
) -> Result<EstimatorReport, RssError> {
    let d: Vec<f64> = measurements.iter().map(|m| m.est_distance).collect();
    locate(anchors, &d, model, estimator)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::seeded_rng;
    use approx::assert_abs_diff_eq;
    use nalgebra::DVector;
    use proptest::prelude::*;

    fn pos(x: f64, y: f64) -> Position2D {
        Position2D::new(x, y)
    }

    fn set(points: &[(f64, f64)]) -> AnchorSet {
        AnchorSet::new(points.iter().map(|&(x, y)| pos(x, y)).collect()).unwrap()
    }

    fn ghz(sigma: f64) -> ChannelModel {
        ChannelModel::at_frequency(1.0, 2.0, sigma, 1e9).unwrap()
    }

    #[test]
    fn ls_recovers_noiseless_node() {
        let anchors = set(&[(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)]);
        let node = pos(3.0, 4.0);
        let sys = build_lop_system(&anchors, &anchors.distances_to(node)).unwrap();
        let p = ls_solve(&sys).unwrap();
        assert_abs_diff_eq!(p.x, 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(p.y, 4.0, epsilon = 1e-9);
    }

    #[test]
    fn ls_on_identity_system() {
        let sys = LinearSystem { a: DMatrix::identity(2, 2), b: DVector::from_vec(vec![7.0, -2.0]) };
        assert_eq!(ls_solve(&sys).unwrap(), pos(7.0, -2.0));
    }

    #[test]
    fn ls_rejects_rank_deficient_system() {
        let sys = LinearSystem {
            a: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]),
            b: DVector::from_vec(vec![1.0, 2.0]),
        };
        assert!(matches!(ls_solve(&sys), Err(RssError::SingularSystem { .. })));
    }

    /// Nested grid search for the minimizer of `|A p - b|^2`.
    fn grid_oracle(sys: &LinearSystem) -> Position2D {
        let cost = |x: f64, y: f64| sys.residual(pos(x, y)).norm_squared();
        let (mut cx, mut cy, mut half) = (0.0, 0.0, 100.0);
        for _ in 0..40 {
            let mut best = (f64::INFINITY, cx, cy);
            for i in -10..=10 {
                for k in -10..=10 {
                    let (x, y) = (cx + half * i as f64 / 10.0, cy + half * k as f64 / 10.0);
                    let c = cost(x, y);
                    if c < best.0 {
                        best = (c, x, y);
                    }
                }
            }
            cx = best.1;
            cy = best.2;
            half *= 0.3;
        }
        pos(cx, cy)
    }

    #[test]
    fn ls_matches_grid_search_oracle() {
        let sys = LinearSystem {
            a: DMatrix::from_row_slice(5, 2, &[1.0, 2.0, -3.0, 0.5, 2.0, 2.0, 0.1, -1.0, 4.0, 1.0]),
            b: DVector::from_vec(vec![3.0, -1.0, 2.5, 0.7, 9.0]),
        };
        let p = ls_solve(&sys).unwrap();
        let q = grid_oracle(&sys);
        assert!((p - q).norm() < 1e-6, "{p:?} vs {q:?}");
    }

    #[test]
    fn wls_with_identity_equals_ls() {
        let anchors = set(&[(0.0, 0.0), (50.0, 0.0), (0.0, 50.0), (60.0, 70.0)]);
        let d = [20.0, 41.0, 33.0, 50.0];
        let sys = build_lop_system(&anchors, &d).unwrap();
        let a = ls_solve(&sys).unwrap();
        let b = wls_solve(&sys, &WeightMatrix::identity(3)).unwrap();
        assert!((a - b).norm() < 1e-12);
    }

    #[test]
    fn equal_distances_give_ls_estimate() {
        // Anchors on a circle around the node; every estimate has the same length.
        let anchors = set(&[(10.0, 0.0), (0.0, 10.0), (-10.0, 0.0), (0.0, -10.0)]);
        let d = [9.0, 9.0, 9.0, 9.0];
        let sys = build_lop_system(&anchors, &d).unwrap();
        let w = wls_weights(&ghz(4.0), &d).unwrap();
        let a = ls_solve(&sys).unwrap();
        let b = wls_solve(&sys, &w).unwrap();
        assert!((a - b).norm() < 1e-9);
    }

    #[test]
    fn nearer_anchor_gets_larger_weight() {
        let w = wls_weights(&ghz(4.0), &[5.0, 10.0, 20.0]).unwrap();
        assert!(w.as_matrix()[(0, 0)] > w.as_matrix()[(1, 1)]);
    }

    #[test]
    fn weights_match_explicit_inverse() {
        let m = ghz(3.0);
        let d = [12.0, 30.0, 18.0];
        let v: Vec<f64> = d.iter().map(|&x| m.squared_distance_variance(x)).collect();
        let s = DMatrix::from_row_slice(2, 2, &[v[0] + v[2], v[2], v[2], v[1] + v[2]]) * 0.25;
        let expected = s.try_inverse().unwrap();
        let w = wls_weights(&m, &d).unwrap();
        let rel = (w.as_matrix() - &expected).amax() / expected.amax();
        assert!(rel < 1e-12);
    }

    #[test]
    fn zero_shadowing_falls_back_to_identity() {
        let w = wls_weights(&ghz(0.0), &[3.0, 4.0, 5.0]).unwrap();
        assert_eq!(w, WeightMatrix::identity(2));
    }

    #[test]
    fn weight_matrix_validation() {
        assert!(WeightMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])).is_err());
        assert!(WeightMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0])).is_err());
        assert!(WeightMatrix::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0])).is_ok());
    }

    #[test]
    fn irls_converges_immediately_on_noiseless_system() {
        let anchors = set(&[(0.0, 0.0), (30.0, 0.0), (0.0, 30.0), (30.0, 30.0), (15.0, 40.0)]);
        let node = pos(12.0, 7.0);
        let d = anchors.distances_to(node);
        let sys = build_lop_system(&anchors, &d).unwrap();
        let w = wls_weights(&ghz(2.0), &d).unwrap();
        let rep = huber_irls(&sys, &w, &HuberConfig::default()).unwrap();
        assert!(rep.iterations <= 2);
        assert!(rep.converged);
        assert!((rep.position - node).norm() < 1e-9);
    }

    #[test]
    fn irls_rejects_bad_config() {
        let sys = LinearSystem { a: DMatrix::identity(2, 2), b: DVector::from_vec(vec![1.0, 1.0]) };
        let w = WeightMatrix::identity(2);
        let bad = HuberConfig { epsilon: 0.0, ..HuberConfig::default() };
        assert!(huber_irls(&sys, &w, &bad).is_err());
        let bad = HuberConfig { max_iter: 0, ..HuberConfig::default() };
        assert!(huber_irls(&sys, &w, &bad).is_err());
    }

    #[test]
    fn irls_resists_a_single_outlier() {
        let anchors = set(&[(0.0, 0.0), (100.0, 0.0), (100.0, 100.0), (0.0, 100.0), (50.0, 0.0), (50.0, 100.0)]);
        let node = pos(40.0, 55.0);
        let model = ghz(1.0);
        let mut rng = seeded_rng(99);
        let (mut ls_sq, mut hub_sq) = (0.0, 0.0);
        for _ in 0..150 {
            let mut d: Vec<f64> = anchors
                .distances_to(node)
                .iter()
                .map(|&t| RssMeasurement::observe(t, &model, &model, &mut rng).unwrap().est_distance)
                .collect();
            d[0] *= 3.0;
            let ls = locate(&anchors, &d, &model, RssEstimator::Ls).unwrap();
            let hub = locate(&anchors, &d, &model, RssEstimator::Huber(HuberConfig::default())).unwrap();
            ls_sq += (ls.position - node).norm_sqr();
            hub_sq += (hub.position - node).norm_sqr();
        }
        assert!(hub_sq < ls_sq, "huber {hub_sq} vs ls {ls_sq}");
    }

    proptest! {
        #[test]
        fn ls_is_a_minimizer(
            rows in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0, -10.0f64..10.0), 3..8),
            deltas in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 100),
        ) {
            let n = rows.len();
            let a = DMatrix::from_fn(n, 2, |i, k| if k == 0 { rows[i].0 } else { rows[i].1 });
            let b = DVector::from_fn(n, |i, _| rows[i].2);
            let sys = LinearSystem { a, b };
            if let Ok(p) = ls_solve(&sys) {
                let base = sys.residual(p).norm();
                for &(dx, dy) in &deltas {
                    prop_assert!(sys.residual(p + pos(dx, dy)).norm() >= base - 1e-9 * base.max(1.0));
                }
            }
        }

        #[test]
        fn wls_is_scale_invariant(c in 1e-3f64..1e3, node in (-40.0f64..40.0, -40.0f64..40.0)) {
            let anchors = set(&[(-50.0, -50.0), (50.0, -50.0), (50.0, 50.0), (-50.0, 50.0)]);
            let d: Vec<f64> = anchors.distances_to(pos(node.0, node.1)).iter().map(|v| v * 1.1 + 0.5).collect();
            let sys = build_lop_system(&anchors, &d).unwrap();
            let ls = ls_solve(&sys).unwrap();
            let scaled = wls_solve(&sys, &WeightMatrix::new(DMatrix::identity(3, 3) * c).unwrap()).unwrap();
            prop_assert!((ls - scaled).norm() < 1e-8 * ls.norm().max(1.0));
        }

        #[test]
        fn estimators_exact_without_noise(node in (-45.0f64..45.0, -45.0f64..45.0), sigma in 0.0f64..6.0) {
            let anchors = set(&[(-50.0, -50.0), (50.0, -50.0), (50.0, 50.0), (-50.0, 50.0), (0.0, 60.0)]);
            let node = pos(node.0, node.1);
            let d = anchors.distances_to(node);
            let model = ghz(sigma);
            for est in [RssEstimator::Ls, RssEstimator::Wls, RssEstimator::Huber(HuberConfig::default())] {
                let rep = locate(&anchors, &d, &model, est).unwrap();
                prop_assert!((rep.position - node).norm() < 1e-9);
            }
        }

        #[test]
        fn irls_objective_does_not_increase(seed in 0u64..500) {
            let anchors = set(&[(0.0, 0.0), (100.0, 0.0), (100.0, 100.0), (0.0, 100.0), (50.0, 0.0), (50.0, 100.0)]);
            let node = pos(30.0, 60.0);
            let model = ghz(4.0);
            let mut rng = seeded_rng(seed);
            let d: Vec<f64> = anchors
                .distances_to(node)
                .iter()
                .map(|&t| RssMeasurement::observe(t, &model, &model, &mut rng).unwrap().est_distance)
                .collect();
            let sys = build_lop_system(&anchors, &d).unwrap();
            for w in [WeightMatrix::identity(sys.rows()), wls_weights(&model, &d).unwrap()] {
                let rep = huber_irls(&sys, &w, &HuberConfig::default()).unwrap();
                for pair in rep.objective_trace.windows(2) {
                    prop_assert!(pair[1] <= pair[0] + 1e-8 * pair[0].max(1.0), "{:?}", rep.objective_trace);
                }
            }
        }
    }
}
