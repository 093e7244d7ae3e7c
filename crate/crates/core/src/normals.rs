//! Per-point normal estimation: PCA plane fit over the k nearest neighbors,
//! oriented toward a viewpoint (single-view scans) or outward from an axis
//! or interior point (full models).

use nalgebra::{Matrix3, SymmetricEigen};
use thiserror::Error;

use crate::geometry::{Point3, PointCloud, Vector3};
use crate::index::SpatialIndex;
use crate::parallel;

/// Relative eigenvalue gap below which a neighborhood is treated as
/// degenerate (e.g. collinear points) and flagged low-confidence.
const DEGENERATE_EIGEN_GAP: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NormalsError {
    #[error("normal estimation needs at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("neighbor count k must be at least 3, got {0}")]
    InvalidK(usize),
    #[error("axis direction must be non-zero")]
    ZeroAxis,
}

/// How to resolve the sign of each estimated normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormalOrientation {
    /// Flip normals to face the given viewpoint (camera position).
    Viewpoint(Point3),
    /// Flip normals away from a line; suited to open cylindrical surfaces.
    OutwardFromAxis { origin: Point3, direction: Vector3 },
    /// Flip normals away from an interior reference point; suited to closed
    /// full models where end-cap normals are parallel to the main axis.
    OutwardFromPoint(Point3),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalEstimationParams {
    /// Neighbor count for the PCA plane fit (the query point itself plus
    /// its k nearest neighbors enter the covariance).
    pub k: usize,
    pub orientation: NormalOrientation,
}

impl NormalEstimationParams {
    pub fn new(k: usize, orientation: NormalOrientation) -> Self {
        NormalEstimationParams { k, orientation }
    }
}

/// Output of [`estimate_normals`]: the input cloud with unit normals
/// attached, plus a per-point low-confidence flag for degenerate
/// neighborhoods. Flags propagate into feature matching, which skips
/// flagged points.
#[derive(Debug, Clone)]
pub struct EstimatedNormals {
    pub cloud: PointCloud,
    pub low_confidence: Vec<bool>,
}

pub fn estimate_normals(
    cloud: &PointCloud,
    params: &NormalEstimationParams,
) -> Result<EstimatedNormals, NormalsError> {
    if params.k < 3 {
        return Err(NormalsError::InvalidK(params.k));
    }
    if cloud.len() < params.k + 1 {
        return Err(NormalsError::TooFewPoints {
            needed: params.k + 1,
            got: cloud.len(),
        });
    }
    if let NormalOrientation::OutwardFromAxis { direction, .. } = params.orientation {
        if direction.norm() < 1e-12 {
            return Err(NormalsError::ZeroAxis);
        }
    }

    let index = SpatialIndex::build(cloud).expect("non-empty cloud");
    let points = cloud.points();
    let orientation = params.orientation;
    let k = params.k;

    let results: Vec<(Vector3, bool)> = parallel::map_indexed(points.len(), |i| {
        let p = points[i];
        let neighbors = index.k_nearest(&p, k + 1);
        let mut centroid = Vector3::zeros();
        for &(j, _) in &neighbors {
            centroid += points[j].coords;
        }
        centroid /= neighbors.len() as f64;
        let mut cov = Matrix3::zeros();
        for &(j, _) in &neighbors {
            let d = points[j].coords - centroid;
            cov += d * d.transpose();
        }

        let eig = SymmetricEigen::new(cov);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
        let l_min = eig.eigenvalues[order[0]].max(0.0);
        let l_mid = eig.eigenvalues[order[1]].max(0.0);
        let l_max = eig.eigenvalues[order[2]].max(0.0);
        let low_confidence = (l_mid - l_min) <= DEGENERATE_EIGEN_GAP * l_max.max(1e-300);

        let mut normal: Vector3 = eig.eigenvectors.column(order[0]).into();
        let norm = normal.norm();
        if norm > 0.0 {
            normal /= norm;
        } else {
            normal = Vector3::z();
        }

        let reference = match orientation {
            NormalOrientation::Viewpoint(v) => v - p,
            NormalOrientation::OutwardFromAxis { origin, direction } => {
                let axis = direction.normalize();
                let rel = p - origin;
                rel - axis * rel.dot(&axis)
            }
            NormalOrientation::OutwardFromPoint(c) => p - c,
        };
        if normal.dot(&reference) < 0.0 {
            normal = -normal;
        }
        (normal, low_confidence)
    });

    let (normals, low_confidence): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let cloud = cloud
        .clone()
        .with_normals(normals)
        .expect("estimated normals are unit length");
    Ok(EstimatedNormals {
        cloud,
        low_confidence,
    })
}
