//! Multi-step ICP refinement with a decreasing maximum matching distance.
//!
//! Shrinking d_max across steps prunes false matches as the alignment
//! improves; each step starts from the previous step's result. Point-to-point
//! solves the closed-form SVD problem, point-to-plane the linearized normal
//! equations over a 6-vector twist. RMSE is always the Euclidean residual
//! over the current correspondence set so the two variants are comparable.

use std::time::Instant;

use nalgebra::{Matrix3, SMatrix, SVector};
use serde::Serialize;
use thiserror::Error;

use crate::geometry::{so3_exp, Point3, PointCloud, RigidTransform, Vector3};
use crate::index::SpatialIndex;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IcpStepError {
    #[error("no correspondences within d_max = {d_max_mm} mm")]
    NoCorrespondences { d_max_mm: f64 },
    #[error("point-to-plane needs target normals")]
    MissingNormals,
    #[error("d_max must be positive, got {0}")]
    NonPositiveDmax(f64),
    #[error("degenerate correspondence geometry; solve failed")]
    Degenerate,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FineError {
    #[error("step {step} ({d_max_mm} mm): {source}")]
    Step {
        step: usize,
        d_max_mm: f64,
        source: IcpStepError,
    },
    #[error("schedule must be non-empty, positive and strictly decreasing")]
    InvalidSchedule,
    #[error("point-to-plane needs target normals")]
    MissingNormals,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum IcpVariant {
    PointToPoint,
    PointToPlane,
}

impl IcpVariant {
    pub fn name(self) -> &'static str {
        match self {
            IcpVariant::PointToPoint => "point2point",
            IcpVariant::PointToPlane => "point2plane",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "point2point" => Some(IcpVariant::PointToPoint),
            "point2plane" => Some(IcpVariant::PointToPlane),
            _ => None,
        }
    }
}

/// Per-step iteration and convergence controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpLimits {
    pub max_iterations: usize,
    /// Stop when the relative RMSE improvement within an iteration falls
    /// below this.
    pub rel_rmse_change: f64,
    /// Stop when the incremental update (rotation angle + translation norm)
    /// falls below this.
    pub min_transform_delta: f64,
}

impl Default for IcpLimits {
    fn default() -> Self {
        IcpLimits {
            max_iterations: 50,
            rel_rmse_change: 1e-6,
            min_transform_delta: 1e-10,
        }
    }
}

/// Ordered d_max schedule; strictly decreasing, all positive.
#[derive(Debug, Clone, PartialEq)]
pub struct IcpSchedule {
    steps: Vec<f64>,
    pub limits: IcpLimits,
}

impl IcpSchedule {
    pub fn new(steps: Vec<f64>, limits: IcpLimits) -> Result<Self, FineError> {
        if steps.is_empty()
            || steps.iter().any(|&d| !(d > 0.0))
            || steps.windows(2).any(|w| w[1] >= w[0])
        {
            return Err(FineError::InvalidSchedule);
        }
        Ok(IcpSchedule { steps, limits })
    }

    /// The paper's three-step schedule: 10 → 1 → 0.1 mm.
    pub fn standard() -> Self {
        IcpSchedule::new(vec![10.0, 1.0, 0.1], IcpLimits::default()).unwrap()
    }

    pub fn steps(&self) -> &[f64] {
        &self.steps
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub label: String,
    pub d_max_mm: Option<f64>,
    pub rmse_mm: f64,
    pub correspondences: usize,
    pub iterations: usize,
    pub elapsed_seconds: f64,
}

/// Per-step telemetry plus the final cumulative transform.
#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationReport {
    pub steps: Vec<StepReport>,
    pub transform: RigidTransform,
}

impl RegistrationReport {
    pub fn final_rmse_mm(&self) -> f64 {
        self.steps.last().map(|s| s.rmse_mm).unwrap_or(f64::NAN)
    }

    pub fn total_iterations(&self) -> usize {
        self.steps.iter().map(|s| s.iterations).sum()
    }
}

fn correspondences(
    source: &[Point3],
    target_index: &SpatialIndex,
    transform: &RigidTransform,
    d_max: f64,
) -> Vec<(usize, usize)> {
    crate::parallel::map_indexed(source.len(), |i| {
        let moved = transform.apply_point(&source[i]);
        target_index.nearest_within(&moved, d_max).map(|(j, _)| (i, j))
    })
    .into_iter()
    .flatten()
    .collect()
}

fn rmse_over(
    source: &[Point3],
    target: &[Point3],
    pairs: &[(usize, usize)],
    transform: &RigidTransform,
) -> f64 {
    let sum: f64 = pairs
        .iter()
        .map(|&(i, j)| (transform.apply_point(&source[i]) - target[j]).norm_squared())
        .sum();
    (sum / pairs.len() as f64).sqrt()
}

/// Closed-form least-squares rigid motion (Horn/SVD) mapping the moved
/// source points onto their matched targets.
fn solve_point_to_point(
    moved: &[Point3],
    target: &[Point3],
    pairs: &[(usize, usize)],
) -> Result<RigidTransform, IcpStepError> {
    let n = pairs.len() as f64;
    let mut c_src = Vector3::zeros();
    let mut c_dst = Vector3::zeros();
    for &(i, j) in pairs {
        c_src += moved[i].coords;
        c_dst += target[j].coords;
    }
    c_src /= n;
    c_dst /= n;
    let mut h = Matrix3::zeros();
    for &(i, j) in pairs {
        h += (moved[i].coords - c_src) * (target[j].coords - c_dst).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.ok_or(IcpStepError::Degenerate)?;
    let v_t = svd.v_t.ok_or(IcpStepError::Degenerate)?;
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d.signum()));
    let rotation = v * correction * u.transpose();
    let translation = c_dst - rotation * c_src;
    Ok(RigidTransform::from_parts(rotation, translation))
}

/// Linearized point-to-plane normal equations; returns the raw twist.
fn solve_point_to_plane(
    moved: &[Point3],
    target: &[Point3],
    normals: &[Vector3],
    pairs: &[(usize, usize)],
) -> Result<SVector<f64, 6>, IcpStepError> {
    let mut a = SMatrix::<f64, 6, 6>::zeros();
    let mut b = SVector::<f64, 6>::zeros();
    for &(i, j) in pairs {
        let x = moved[i].coords;
        let n = normals[j];
        let residual = (x - target[j].coords).dot(&n);
        let mut row = SVector::<f64, 6>::zeros();
        let cross = x.cross(&n);
        row.fixed_rows_mut::<3>(0).copy_from(&cross);
        row.fixed_rows_mut::<3>(3).copy_from(&n);
        a += row * row.transpose();
        b -= row * residual;
    }
    solve_spd(a, b).ok_or(IcpStepError::Degenerate)
}

fn twist_to_transform(xi: &SVector<f64, 6>) -> RigidTransform {
    let omega = Vector3::new(xi[0], xi[1], xi[2]);
    let v = Vector3::new(xi[3], xi[4], xi[5]);
    RigidTransform::from_parts(so3_exp(&omega), v)
}

/// RMS of the along-normal residuals, the metric point-to-plane minimizes.
fn plane_rms(
    source: &[Point3],
    target: &[Point3],
    normals: &[Vector3],
    pairs: &[(usize, usize)],
    transform: &RigidTransform,
) -> f64 {
    let sum: f64 = pairs
        .iter()
        .map(|&(i, j)| {
            let r = (transform.apply_point(&source[i]) - target[j]).dot(&normals[j]);
            r * r
        })
        .sum();
    (sum / pairs.len() as f64).sqrt()
}

pub(crate) fn solve_spd(
    mut a: SMatrix<f64, 6, 6>,
    b: SVector<f64, 6>,
) -> Option<SVector<f64, 6>> {
    if let Some(chol) = a.cholesky() {
        return Some(chol.solve(&b));
    }
    // Tikhonov fallback for rank-deficient geometry.
    let lambda = 1e-9 * a.trace().max(1e-12);
    for i in 0..6 {
        a[(i, i)] += lambda;
    }
    a.cholesky().map(|c| c.solve(&b))
}

pub(crate) struct IcpIterationTrace {
    /// Euclidean RMSE over the iteration's correspondence set.
    pub rmse_before: f64,
    pub rmse_after: f64,
    /// The solve's own metric: Euclidean RMSE for point-to-point, plane RMS
    /// for point-to-plane. Non-increasing by construction.
    pub metric_before: f64,
    pub metric_after: f64,
}

/// A single ICP stage at fixed d_max; returns the refined absolute transform
/// and its report. Iterates correspondence search and solve until the RMSE
/// improvement or the transform update is negligible.
pub fn icp_step(
    source: &PointCloud,
    target: &PointCloud,
    target_index: &SpatialIndex,
    init: &RigidTransform,
    d_max_mm: f64,
    variant: IcpVariant,
    limits: &IcpLimits,
) -> Result<(RigidTransform, StepReport), IcpStepError> {
    icp_step_traced(
        source,
        target,
        target_index,
        init,
        d_max_mm,
        variant,
        limits,
        &mut Vec::new(),
    )
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn icp_step_traced(
    source: &PointCloud,
    target: &PointCloud,
    target_index: &SpatialIndex,
    init: &RigidTransform,
    d_max_mm: f64,
    variant: IcpVariant,
    limits: &IcpLimits,
    trace: &mut Vec<IcpIterationTrace>,
) -> Result<(RigidTransform, StepReport), IcpStepError> {
    if !(d_max_mm > 0.0) {
        return Err(IcpStepError::NonPositiveDmax(d_max_mm));
    }
    let target_normals = match variant {
        IcpVariant::PointToPlane => {
            Some(target.normals().ok_or(IcpStepError::MissingNormals)?)
        }
        IcpVariant::PointToPoint => None,
    };
    let src = source.points();
    let dst = target.points();
    let started = Instant::now();

    let mut transform = *init;
    let mut rmse = f64::NAN;
    let mut pair_count = 0usize;
    let mut iterations = 0usize;
    for _ in 0..limits.max_iterations {
        iterations += 1;
        let pairs = correspondences(src, target_index, &transform, d_max_mm);
        if pairs.is_empty() {
            return Err(IcpStepError::NoCorrespondences { d_max_mm });
        }
        let rmse_before = rmse_over(src, dst, &pairs, &transform);

        let moved: Vec<Point3> = src.iter().map(|p| transform.apply_point(p)).collect();
        let (delta, metric_before, metric_after) = match variant {
            IcpVariant::PointToPoint => {
                // Closed-form optimum; Euclidean RMSE cannot increase.
                let delta = solve_point_to_point(&moved, dst, &pairs)?;
                let after = rmse_over(src, dst, &pairs, &delta.compose(&transform));
                (delta, rmse_before, after)
            }
            IcpVariant::PointToPlane => {
                let normals = target_normals.unwrap();
                let before = plane_rms(src, dst, normals, &pairs, &transform);
                let mut xi = solve_point_to_plane(&moved, dst, normals, &pairs)?;
                // Backtrack on overshoot so the plane metric never rises.
                let mut delta = RigidTransform::identity();
                let mut after = before;
                for _ in 0..24 {
                    let candidate = twist_to_transform(&xi);
                    let cand =
                        plane_rms(src, dst, normals, &pairs, &candidate.compose(&transform));
                    if cand <= before + 1e-12 * before.max(1.0) {
                        delta = candidate;
                        after = cand;
                        break;
                    }
                    xi *= 0.5;
                }
                (delta, before, after)
            }
        };
        let candidate = delta.compose(&transform);
        let rmse_after = rmse_over(src, dst, &pairs, &candidate);
        trace.push(IcpIterationTrace {
            rmse_before,
            rmse_after,
            metric_before,
            metric_after,
        });
        transform = candidate;
        rmse = rmse_after;
        pair_count = pairs.len();

        let rel_change = (rmse_before - rmse_after).abs() / rmse_before.max(1e-12);
        let delta_magnitude = RigidTransform::identity().rotation_angle_to(&delta)
            + delta.translation().norm();
        if rel_change < limits.rel_rmse_change || delta_magnitude < limits.min_transform_delta {
            break;
        }
    }

    let report = StepReport {
        label: format!("icp d_max={d_max_mm}"),
        d_max_mm: Some(d_max_mm),
        rmse_mm: rmse,
        correspondences: pair_count,
        iterations,
        elapsed_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((transform, report))
}

/// Chains [`icp_step`] over the schedule, composing the transforms; the
/// report carries one entry per step. Target normals must be present for
/// point-to-plane (estimate them once, before the schedule).
pub fn icp_multistep(
    source: &PointCloud,
    target: &PointCloud,
    init: &RigidTransform,
    schedule: &IcpSchedule,
    variant: IcpVariant,
) -> Result<(RigidTransform, RegistrationReport), FineError> {
    if schedule.steps.is_empty() {
        return Err(FineError::InvalidSchedule);
    }
    if variant == IcpVariant::PointToPlane && target.normals().is_none() {
        return Err(FineError::MissingNormals);
    }
    let target_index = SpatialIndex::build(target).map_err(|_| FineError::Step {
        step: 0,
        d_max_mm: schedule.steps[0],
        source: IcpStepError::NoCorrespondences {
            d_max_mm: schedule.steps[0],
        },
    })?;

    let mut transform = *init;
    let mut steps = Vec::with_capacity(schedule.steps.len());
    for (k, &d_max) in schedule.steps.iter().enumerate() {
        let (next, report) = icp_step(
            source,
            target,
            &target_index,
            &transform,
            d_max,
            variant,
            &schedule.limits,
        )
        .map_err(|source| FineError::Step {
            step: k,
            d_max_mm: d_max,
            source,
        })?;
        transform = next;
        steps.push(report);
    }
    Ok((
        transform,
        RegistrationReport {
            steps,
            transform,
        },
    ))
}
