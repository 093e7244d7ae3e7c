//! Fast global registration over FPFH correspondences.
//!
//! Correspondences come from reciprocal nearest-neighbor matching in the
//! 33-dimensional feature space, pruned by the tuple test (pairwise length
//! ratios of random correspondence triples). The alignment then minimizes a
//! Geman-McClure cost with graduated non-convexity: the scale mu anneals
//! from the squared cloud diameter down to a floor, and each inner iteration
//! solves the line-process-weighted linearized least squares over a twist.

use std::collections::BTreeSet;
use std::time::Instant;

use nalgebra::{Matrix3, SMatrix, SVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::fine::{solve_spd, RegistrationReport, StepReport};
use crate::fpfh::{FpfhSet, FEATURE_DIM};
use crate::geometry::{so3_exp, Point3, PointCloud, RigidTransform, Vector3};
use crate::parallel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoarseError {
    #[error("feature set is empty (or fully flagged)")]
    EmptyFeatures,
    #[error("no correspondences survived matching")]
    NoCorrespondences,
    #[error("need at least 3 correspondences, got {0}")]
    TooFewCorrespondences(usize),
    #[error("correspondences are collinear or coincident")]
    DegenerateCorrespondences,
    #[error("optimization diverged (non-finite objective)")]
    NonConvergence,
}

/// Feature-space matches: (source index, target index) pairs, deduplicated.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    pub pairs: Vec<(u32, u32)>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FgrParams {
    /// Mu decay per graduation step (every 4 inner iterations).
    pub division_factor: f64,
    pub max_iterations: usize,
    /// Tuple test keeps triples whose length ratios lie in [tau, 1/tau].
    pub tuple_scale: f64,
    pub tuple_max_count: usize,
    /// Annealing floor for mu, in mm².
    pub stop_mu_mm2: f64,
    pub seed: u64,
}

impl Default for FgrParams {
    fn default() -> Self {
        FgrParams {
            division_factor: 1.4,
            max_iterations: 64,
            tuple_scale: 0.95,
            tuple_max_count: 1000,
            stop_mu_mm2: 0.0625, // (0.25 mm)²
            seed: 0,
        }
    }
}

/// Nearest unflagged feature by squared L2; first (lowest) index wins ties.
fn nearest_feature(
    feats: &FpfhSet,
    query: &[f64; FEATURE_DIM],
) -> Option<usize> {
    let mut best = f64::INFINITY;
    let mut best_idx = None;
    for (j, f) in feats.features.iter().enumerate() {
        if feats.flagged[j] {
            continue;
        }
        let mut acc = 0.0;
        for b in 0..FEATURE_DIM {
            let d = f.bins[b] - query[b];
            acc += d * d;
            if acc >= best {
                break;
            }
        }
        if acc < best {
            best = acc;
            best_idx = Some(j);
        }
    }
    best_idx
}

/// Reciprocal nearest-neighbor matching plus the seeded tuple test.
/// Flagged features (isolated points, low-confidence normals) are skipped.
pub fn match_features(
    src: &FpfhSet,
    dst: &FpfhSet,
    src_cloud: &PointCloud,
    dst_cloud: &PointCloud,
    params: &FgrParams,
) -> Result<CorrespondenceSet, CoarseError> {
    assert_eq!(src.len(), src_cloud.len(), "source features match cloud");
    assert_eq!(dst.len(), dst_cloud.len(), "target features match cloud");
    if src.is_empty()
        || dst.is_empty()
        || src.flagged.iter().all(|&f| f)
        || dst.flagged.iter().all(|&f| f)
    {
        return Err(CoarseError::EmptyFeatures);
    }

    let s2d: Vec<Option<usize>> = parallel::map_indexed(src.len(), |i| {
        if src.flagged[i] {
            None
        } else {
            nearest_feature(dst, &src.features[i].bins)
        }
    });
    let d2s: Vec<Option<usize>> = parallel::map_indexed(dst.len(), |j| {
        if dst.flagged[j] {
            None
        } else {
            nearest_feature(src, &dst.features[j].bins)
        }
    });

    let reciprocal: Vec<(u32, u32)> = (0..src.len())
        .filter_map(|i| {
            let j = s2d[i]?;
            (d2s[j] == Some(i)).then_some((i as u32, j as u32))
        })
        .collect();
    if reciprocal.is_empty() {
        return Err(CoarseError::NoCorrespondences);
    }
    if reciprocal.len() < 3 || params.tuple_max_count == 0 {
        return Ok(CorrespondenceSet { pairs: reciprocal });
    }

    // Tuple test: random correspondence triples survive only when all three
    // pairwise source/target length ratios are within [tau, 1/tau]. Up to
    // 100 trials per correspondence, stopping at tuple_max_count accepted.
    let src_pts = src_cloud.points();
    let dst_pts = dst_cloud.points();
    let tau = params.tuple_scale;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut kept: BTreeSet<(u32, u32)> = BTreeSet::new();
    let mut accepted = 0usize;
    for _ in 0..reciprocal.len().saturating_mul(100) {
        if accepted >= params.tuple_max_count {
            break;
        }
        let picks: [(u32, u32); 3] =
            std::array::from_fn(|_| reciprocal[rng.random_range(0..reciprocal.len())]);
        let mut ok = true;
        for e in 0..3 {
            let (a_s, a_d) = picks[e];
            let (b_s, b_d) = picks[(e + 1) % 3];
            let ls = (src_pts[a_s as usize] - src_pts[b_s as usize]).norm();
            let ld = (dst_pts[a_d as usize] - dst_pts[b_d as usize]).norm();
            if ld < 1e-12 || ls < 1e-12 {
                ok = false;
                break;
            }
            let ratio = ls / ld;
            if ratio < tau || ratio > 1.0 / tau {
                ok = false;
                break;
            }
        }
        if ok {
            kept.extend(picks);
            accepted += 1;
        }
    }
    if kept.is_empty() {
        return Err(CoarseError::NoCorrespondences);
    }
    Ok(CorrespondenceSet {
        pairs: kept.into_iter().collect(),
    })
}

fn geman_mcclure_objective(residuals_sq: &[f64], mu: f64) -> f64 {
    residuals_sq.iter().map(|&r2| mu * r2 / (mu + r2)).sum()
}

/// Graduated non-convexity alignment of matched points. Returns the
/// source-to-target transform and a one-step report whose RMSE covers the
/// correspondences with a final line-process weight above 0.5.
pub fn fgr_align(
    source: &PointCloud,
    target: &PointCloud,
    corr: &CorrespondenceSet,
    params: &FgrParams,
) -> Result<(RigidTransform, RegistrationReport), CoarseError> {
    fgr_align_traced(source, target, corr, params, &mut Vec::new())
}

/// As [`fgr_align`], also recording (mu, objective) per inner iteration so
/// tests can assert per-stage monotonicity.
pub fn fgr_align_traced(
    source: &PointCloud,
    target: &PointCloud,
    corr: &CorrespondenceSet,
    params: &FgrParams,
    trace: &mut Vec<(f64, f64)>,
) -> Result<(RigidTransform, RegistrationReport), CoarseError> {
    let n = corr.len();
    if n < 3 {
        return Err(CoarseError::TooFewCorrespondences(n));
    }
    let started = Instant::now();
    let src: Vec<Vector3> = corr
        .pairs
        .iter()
        .map(|&(i, _)| source.points()[i as usize].coords)
        .collect();
    let dst: Vec<Vector3> = corr
        .pairs
        .iter()
        .map(|&(_, j)| target.points()[j as usize].coords)
        .collect();

    // Center and scale for conditioning; the transform is de-normalized on
    // output. Scale = the larger mean distance to the respective centroid.
    let c_src = src.iter().sum::<Vector3>() / n as f64;
    let c_dst = dst.iter().sum::<Vector3>() / n as f64;
    let mean_s = src.iter().map(|p| (p - c_src).norm()).sum::<f64>() / n as f64;
    let mean_d = dst.iter().map(|p| (p - c_dst).norm()).sum::<f64>() / n as f64;
    let scale = mean_s.max(mean_d).max(1e-9);
    let src_n: Vec<Vector3> = src.iter().map(|p| (p - c_src) / scale).collect();
    let dst_n: Vec<Vector3> = dst.iter().map(|p| (p - c_dst) / scale).collect();

    // Collinear or coincident source geometry cannot pin a rigid transform.
    {
        let mut cov = Matrix3::zeros();
        for p in &src_n {
            cov += p * p.transpose();
        }
        let eig = SymmetricEigen::new(cov);
        let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if vals[1] < 1e-9 {
            return Err(CoarseError::DegenerateCorrespondences);
        }
    }

    // Mu starts at the squared diameter (bounding-box diagonal) of the
    // normalized point sets and anneals down to the floor.
    let diameter = {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in src_n.iter().chain(dst_n.iter()) {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (hi - lo).norm()
    };
    let stop_mu = params.stop_mu_mm2 / (scale * scale);
    let mut mu = (diameter * diameter).max(stop_mu);

    let mut transform = RigidTransform::identity();
    let residuals_sq = |t: &RigidTransform| -> Vec<f64> {
        src_n
            .iter()
            .zip(&dst_n)
            .map(|(s, d)| (t.rotation() * s + t.translation() - d).norm_squared())
            .collect()
    };

    for it in 0..params.max_iterations {
        if it > 0 && it % 4 == 0 {
            mu = (mu / params.division_factor).max(stop_mu);
        }
        let r2 = residuals_sq(&transform);
        let objective = geman_mcclure_objective(&r2, mu);
        if !objective.is_finite() {
            return Err(CoarseError::NonConvergence);
        }
        trace.push((mu, objective));

        let mut a = SMatrix::<f64, 6, 6>::zeros();
        let mut b = SVector::<f64, 6>::zeros();
        for ((s, d), &r2_i) in src_n.iter().zip(&dst_n).zip(&r2) {
            let w = (mu / (mu + r2_i)).powi(2);
            let x = transform.rotation() * s + transform.translation();
            let e = x - d;
            let mut row = SMatrix::<f64, 3, 6>::zeros();
            // d(exp(w) x + v)/d(w, v) = [-[x]= | I]
            row[(0, 1)] = x.z;
            row[(0, 2)] = -x.y;
            row[(1, 0)] = -x.z;
            row[(1, 2)] = x.x;
            row[(2, 0)] = x.y;
            row[(2, 1)] = -x.x;
            row[(0, 3)] = 1.0;
            row[(1, 4)] = 1.0;
            row[(2, 5)] = 1.0;
            a += row.transpose() * row * w;
            b -= row.transpose() * e * w;
        }
        let Some(mut xi) = solve_spd(a, b) else {
            return Err(if it == 0 {
                CoarseError::DegenerateCorrespondences
            } else {
                CoarseError::NonConvergence
            });
        };

        // Backtracking keeps the stage objective non-increasing even where
        // the Gauss-Newton step overshoots.
        let tol = 1e-12 * objective.abs().max(1.0);
        let mut accepted = transform;
        for _ in 0..24 {
            let omega = Vector3::new(xi[0], xi[1], xi[2]);
            let v = Vector3::new(xi[3], xi[4], xi[5]);
            let candidate =
                RigidTransform::from_parts(so3_exp(&omega), v).compose(&transform);
            let cand_obj = geman_mcclure_objective(&residuals_sq(&candidate), mu);
            if cand_obj <= objective + tol {
                accepted = candidate;
                break;
            }
            xi *= 0.5;
        }
        transform = accepted;
    }

    // De-normalize: y = R x + (scale·t + c_dst − R c_src).
    let rotation = *transform.rotation();
    let translation = scale * transform.translation() + c_dst - rotation * c_src;
    let final_transform = RigidTransform::from_parts(rotation, translation);

    // Report RMSE over confident correspondences (line weight > 0.5).
    let r2_final = residuals_sq(&transform);
    let mut kept_sq = 0.0;
    let mut kept = 0usize;
    for &r2_i in &r2_final {
        let w = (mu / (mu + r2_i)).powi(2);
        if w > 0.5 {
            kept_sq += r2_i * scale * scale;
            kept += 1;
        }
    }
    let rmse_mm = if kept > 0 {
        (kept_sq / kept as f64).sqrt()
    } else {
        (r2_final.iter().sum::<f64>() / n as f64).sqrt() * scale
    };
    let report = RegistrationReport {
        steps: vec![StepReport {
            label: "fgr".to_string(),
            d_max_mm: None,
            rmse_mm,
            correspondences: n,
            iterations: params.max_iterations,
            elapsed_seconds: started.elapsed().as_secs_f64(),
        }],
        transform: final_transform,
    };
    Ok((final_transform, report))
}
