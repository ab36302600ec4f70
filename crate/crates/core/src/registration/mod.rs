//! ICP registration of two embedded event slices.
//!
//! The point sets live in `(x, y, scaled t)`. Each iteration matches every
//! source point to its nearest target point, solves the rigid fit by SVD of
//! the cross-covariance, accumulates the yaw (rotation about the time axis)
//! and moves the source by the full transform.

mod grid;

use std::f64::consts::PI;

use nalgebra::{Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::EventSlice;

pub use grid::{brute_force_nearest, GridIndex};

/// Below this many target points the nearest-neighbor search is a plain scan.
pub const GRID_MIN_POINTS: usize = 500;
/// Minimum number of events per slice.
pub const MIN_SLICE_EVENTS: usize = 10;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum RegistrationError {
    #[error("empty point set")]
    EmptyInput,

    #[error("point sets differ in size ({0} vs {1})")]
    SizeMismatch(usize, usize),

    #[error("degenerate geometry: cross-covariance has rank < 2")]
    DegenerateGeometry,

    #[error("slice has {found} events, at least {needed} required")]
    TooFewEvents { found: usize, needed: usize },
}

/// Rotation matrix and translation vector, applied as `R p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform3 {
    pub fn identity() -> Self {
        RigidTransform3 {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// `RᵀR = I` and `det R = +1` within `tol`.
    pub fn is_proper_rotation(&self, tol: f64) -> bool {
        let r = &self.rotation;
        (r.transpose() * r - Matrix3::identity()).abs().max() <= tol && (r.determinant() - 1.0).abs() <= tol
    }
}

/// Yaw rotation about the time axis with row 0 = `[cos γ, sin γ, 0]`.
pub fn yaw_matrix(gamma: f64) -> Matrix3<f64> {
    let (s, c) = gamma.sin_cos();
    Matrix3::new(c, s, 0.0, -s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Roll about X.
pub fn roll_matrix(alpha: f64) -> Matrix3<f64> {
    let (s, c) = alpha.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, s, 0.0, -s, c)
}

/// Pitch about Y.
pub fn pitch_matrix(beta: f64) -> Matrix3<f64> {
    let (s, c) = beta.sin_cos();
    Matrix3::new(c, 0.0, -s, 0.0, 1.0, 0.0, s, 0.0, c)
}

/// Yaw angle of a rotation, in `(-π, π]`.
pub fn extract_yaw(rotation: &Matrix3<f64>) -> f64 {
    let g = rotation[(0, 1)].atan2(rotation[(0, 0)]);
    if g <= -PI {
        PI
    } else {
        g
    }
}

/// For each point of `source`, the index of its nearest point in `target`
/// (lowest index on ties).
pub fn nearest_correspondence(source: &[Point3<f64>], target: &[Point3<f64>]) -> Result<Vec<usize>, RegistrationError> {
    Ok(nearest_with_distances(source, target)?.0)
}

/// Nearest indices together with the Euclidean distances.
pub fn nearest_with_distances(
    source: &[Point3<f64>],
    target: &[Point3<f64>],
) -> Result<(Vec<usize>, Vec<f64>), RegistrationError> {
    if source.is_empty() || target.is_empty() {
        return Err(RegistrationError::EmptyInput);
    }
    let pairs: Vec<(usize, f64)> = if target.len() < GRID_MIN_POINTS {
        source.iter().map(|p| brute_force_nearest(p, target)).collect()
    } else {
        let grid = GridIndex::new(target);
        source.iter().map(|p| grid.nearest(p)).collect()
    };
    Ok(pairs.into_iter().map(|(i, d2)| (i, d2.sqrt())).unzip())
}

fn centroid(points: &[Point3<f64>]) -> Vector3<f64> {
    let sum = points.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords);
    sum / points.len() as f64
}

/// Least-squares rigid transform mapping `source[i]` onto `target[i]`.
///
/// `R = V Uᵀ` from the SVD `cov = U Σ Vᵀ` of the cross-covariance, with the
/// column of `V` belonging to the smallest singular value negated when that
/// product would be a reflection.
pub fn fit_rigid(source: &[Point3<f64>], target: &[Point3<f64>]) -> Result<RigidTransform3, RegistrationError> {
    if source.len() != target.len() {
        return Err(RegistrationError::SizeMismatch(source.len(), target.len()));
    }
    if source.len() < 3 {
        return Err(RegistrationError::DegenerateGeometry);
    }
    let p_bar = centroid(source);
    let q_bar = centroid(target);
    let mut cov = Matrix3::zeros();
    for (p, q) in source.iter().zip(target) {
        cov += (p.coords - p_bar) * (q.coords - q_bar).transpose();
    }
    let svd = cov.svd(true, true);
    let sv = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let largest = sv[order[0]];
    if !(largest > 0.0) || sv[order[1]] <= largest * 1e-12 {
        return Err(RegistrationError::DegenerateGeometry);
    }
    let u = svd.u.ok_or(RegistrationError::DegenerateGeometry)?;
    let v_t = svd.v_t.ok_or(RegistrationError::DegenerateGeometry)?;
    let mut v = v_t.transpose();
    let mut rotation = v * u.transpose();
    if rotation.determinant() < 0.0 {
        let smallest = order[2];
        v.set_column(smallest, &(-v.column(smallest)));
        rotation = v * u.transpose();
    }
    let translation = q_bar - rotation * p_bar;
    Ok(RigidTransform3 { rotation, translation })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcpParams {
    /// Spatial units per millisecond along the time axis.
    pub temporal_scale: f64,
    pub max_iterations: usize,
    /// Stop once `|γ| / |γ_acc|` drops below this (from the second iteration on).
    pub ratio_tolerance: f64,
    /// Stop once `|γ|` drops below this many radians.
    pub min_step: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        IcpParams {
            temporal_scale: crate::estimator::DEFAULT_TEMPORAL_SCALE,
            max_iterations: 50,
            ratio_tolerance: 1e-3,
            min_step: 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcpIteration {
    pub gamma: f64,
    /// Root-mean-square correspondence distance before this iteration's transform.
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    /// Accumulated yaw, radians.
    pub gamma_acc: f64,
    pub iterations: usize,
    /// Root-mean-square nearest-neighbor distance after the last transform.
    pub final_residual: f64,
    pub converged: bool,
    pub transform: RigidTransform3,
    pub trace: Vec<IcpIteration>,
}

impl RegistrationResult {
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iteration,gamma,residual\n");
        for (i, it) in self.trace.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", i + 1, it.gamma, it.residual));
        }
        out
    }
}

/// ICP between two point sets; `source` is moved onto `target`.
pub fn icp_points(source: &[Point3<f64>], target: &[Point3<f64>], params: &IcpParams) -> Result<RegistrationResult, RegistrationError> {
    if source.is_empty() || target.is_empty() {
        return Err(RegistrationError::EmptyInput);
    }
    let grid = (target.len() >= GRID_MIN_POINTS).then(|| GridIndex::new(target));
    let nearest = |p: &Point3<f64>| match &grid {
        Some(g) => g.nearest(p),
        None => brute_force_nearest(p, target),
    };

    let mut moved = source.to_vec();
    let mut matched = Vec::with_capacity(source.len());
    let mut total = RigidTransform3::identity();
    let mut gamma_acc = 0.0;
    let mut trace = Vec::new();
    let mut converged = false;

    for iteration in 1..=params.max_iterations.max(1) {
        matched.clear();
        let mut dist_sum = 0.0;
        for p in &moved {
            let (j, d2) = nearest(p);
            matched.push(target[j]);
            dist_sum += d2;
        }
        let step = fit_rigid(&moved, &matched)?;
        let gamma = extract_yaw(&step.rotation);
        gamma_acc += gamma;
        trace.push(IcpIteration {
            gamma,
            residual: (dist_sum / moved.len() as f64).sqrt(),
        });
        for p in moved.iter_mut() {
            *p = step.apply(p);
        }
        total = RigidTransform3 {
            rotation: step.rotation * total.rotation,
            translation: step.rotation * total.translation + step.translation,
        };

        let small_step = gamma.abs() < params.min_step;
        let small_ratio = iteration >= 2 && gamma.abs() < params.ratio_tolerance * gamma_acc.abs();
        if small_step || small_ratio {
            converged = true;
            break;
        }
    }

    let final_residual = (moved.iter().map(|p| nearest(p).1).sum::<f64>() / moved.len() as f64).sqrt();
    Ok(RegistrationResult {
        gamma_acc,
        iterations: trace.len(),
        final_residual,
        converged,
        transform: total,
        trace,
    })
}

fn check_slice(slice: &EventSlice<'_>) -> Result<(), RegistrationError> {
    if slice.len() < MIN_SLICE_EVENTS {
        return Err(RegistrationError::TooFewEvents {
            found: slice.len(),
            needed: MIN_SLICE_EVENTS,
        });
    }
    Ok(())
}

/// Registers slice `source` onto slice `target`; both are re-based to their own start.
pub fn icp_register(source: &EventSlice<'_>, target: &EventSlice<'_>, params: &IcpParams) -> Result<RegistrationResult, RegistrationError> {
    check_slice(source)?;
    check_slice(target)?;
    let p = source.embed(params.temporal_scale);
    let q = target.embed(params.temporal_scale);
    icp_points(&p, &q, params)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BidirectionalYaw {
    /// Sign-aligned mean of both directions, radians.
    pub gamma: f64,
    pub forward: RegistrationResult,
    pub backward: RegistrationResult,
    /// Only one direction converged; `gamma` comes from that direction alone.
    pub degraded: bool,
    pub converged: bool,
}

/// Registers in both directions and averages `γ(P→Q)` with `-γ(Q→P)`.
pub fn bidirectional_points(p: &[Point3<f64>], q: &[Point3<f64>], params: &IcpParams) -> Result<BidirectionalYaw, RegistrationError> {
    let (forward, backward) = rayon::join(|| icp_points(p, q, params), || icp_points(q, p, params));
    let (forward, backward) = (forward?, backward?);
    let (gamma, degraded) = match (forward.converged, backward.converged) {
        (true, false) => (forward.gamma_acc, true),
        (false, true) => (-backward.gamma_acc, true),
        _ => ((forward.gamma_acc - backward.gamma_acc) / 2.0, false),
    };
    let converged = forward.converged || backward.converged;
    Ok(BidirectionalYaw {
        gamma,
        forward,
        backward,
        degraded,
        converged,
    })
}

pub fn bidirectional_yaw(p: &EventSlice<'_>, q: &EventSlice<'_>, params: &IcpParams) -> Result<BidirectionalYaw, RegistrationError> {
    check_slice(p)?;
    check_slice(q)?;
    bidirectional_points(&p.embed(params.temporal_scale), &q.embed(params.temporal_scale), params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud() -> Vec<Point3<f64>> {
        (0..10)
            .map(|i| {
                let f = i as f64;
                Point3::new(f * 1.7 - 3.0, (f * 0.9).sin() * 5.0, (f * 0.37).cos() * 2.0 + f * 0.1)
            })
            .collect()
    }

    #[test]
    fn correspondence_identity() {
        let p = cloud();
        let idx = nearest_correspondence(&p, &p).unwrap();
        assert_eq!(idx, (0..p.len()).collect::<Vec<_>>());
    }

    #[test]
    fn correspondence_simple() {
        let p = [Point3::new(0.0, 0.0, 0.0)];
        let q = [Point3::new(1.0, 0.0, 0.0), Point3::new(5.0, 0.0, 0.0)];
        assert_eq!(nearest_correspondence(&p, &q).unwrap(), vec![0]);
        assert_eq!(nearest_correspondence(&[], &q), Err(RegistrationError::EmptyInput));
    }

    #[test]
    fn fit_identity() {
        let p = cloud();
        let t = fit_rigid(&p, &p).unwrap();
        assert!((t.rotation - Matrix3::identity()).abs().max() < 1e-12);
        assert!(t.translation.norm() < 1e-12);
    }

    #[test]
    fn fit_quarter_turn() {
        let p = cloud();
        let r = yaw_matrix(PI / 2.0);
        let q: Vec<_> = p.iter().map(|x| Point3::from(r * x.coords)).collect();
        let t = fit_rigid(&p, &q).unwrap();
        assert!((t.rotation - r).abs().max() < 1e-9);
        assert!(t.translation.norm() < 1e-9);
    }

    #[test]
    fn fit_pure_translation() {
        let p = cloud();
        let shift = Vector3::new(5.0, -3.0, 1.0);
        let q: Vec<_> = p.iter().map(|x| x + shift).collect();
        let t = fit_rigid(&p, &q).unwrap();
        assert!((t.rotation - Matrix3::identity()).abs().max() < 1e-9);
        assert!((t.translation - shift).norm() < 1e-9);
    }

    #[test]
    fn fit_degenerate() {
        let p: Vec<_> = (0..5).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        assert_eq!(fit_rigid(&p, &p), Err(RegistrationError::DegenerateGeometry));
        let p = vec![Point3::new(1.0, 1.0, 1.0); 4];
        assert_eq!(fit_rigid(&p, &p), Err(RegistrationError::DegenerateGeometry));
    }

    #[test]
    fn fit_reflection_guard() {
        // A mirrored, nearly planar correspondence forces det(VUᵀ) = -1.
        let p = vec![
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(-1.0, 0.0, 0.0),
            Point3::new(0.0, -1.0, 0.0),
            Point3::new(0.3, 0.2, 0.01),
        ];
        let q: Vec<_> = p.iter().map(|x| Point3::new(x.x, -x.y, x.z)).collect();
        let t = fit_rigid(&p, &q).unwrap();
        assert!(t.is_proper_rotation(1e-9));
    }

    #[test]
    fn yaw_examples() {
        assert_eq!(extract_yaw(&Matrix3::identity()), 0.0);
        assert!((extract_yaw(&yaw_matrix(PI / 6.0)) - PI / 6.0).abs() < 1e-12);
        let r = roll_matrix(0.01) * pitch_matrix(-0.02) * yaw_matrix(0.3);
        assert!((extract_yaw(&r) - 0.3).abs() < 2e-3);
        assert_eq!(extract_yaw(&yaw_matrix(PI)), PI);
        assert_eq!(extract_yaw(&yaw_matrix(-PI)), PI);
    }

    #[test]
    fn icp_identity_stops_immediately() {
        let p = cloud();
        let r = icp_points(&p, &p, &IcpParams::default()).unwrap();
        assert!(r.gamma_acc.abs() < 1e-6);
        assert!(r.iterations <= 2);
        assert!(r.converged);
    }

    #[test]
    fn trace_csv_has_one_row_per_iteration() {
        let p = cloud();
        let r = icp_points(&p, &p, &IcpParams::default()).unwrap();
        assert_eq!(r.trace_csv().lines().count(), r.iterations + 1);
    }
}
