//! 33-dimensional Fast Point Feature Histograms for coarse registration.
//!
//! Per point, the three Darboux-frame angles of every neighbor pair within
//! the radius are binned into 3×11 histograms (SPFH), then aggregated over
//! the neighborhood with inverse-distance weights and renormalized so each
//! 11-bin block sums to 100.

use thiserror::Error;

use crate::geometry::{PointCloud, Vector3};
use crate::index::SpatialIndex;
use crate::parallel;

pub const BINS_PER_FEATURE: usize = 11;
pub const FEATURE_DIM: usize = 3 * BINS_PER_FEATURE;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FpfhError {
    #[error("cloud has no normals; estimate normals first")]
    MissingNormals,
    #[error("search radius must be positive, got {0}")]
    NonPositiveRadius(f64),
    #[error("cloud is empty")]
    EmptyCloud,
}

/// One 33-bin descriptor: theta, alpha and phi blocks of 11 bins each.
#[derive(Debug, Clone, PartialEq)]
pub struct FpfhFeature {
    pub bins: [f64; FEATURE_DIM],
}

impl FpfhFeature {
    pub fn zero() -> Self {
        FpfhFeature {
            bins: [0.0; FEATURE_DIM],
        }
    }

    pub fn distance_squared(&self, other: &FpfhFeature) -> f64 {
        let mut acc = 0.0;
        for i in 0..FEATURE_DIM {
            let d = self.bins[i] - other.bins[i];
            acc += d * d;
        }
        acc
    }
}

/// Features for a whole cloud plus a per-point flag marking descriptors that
/// must not participate in matching (isolated points, or low-confidence
/// normals merged in by the caller).
#[derive(Debug, Clone)]
pub struct FpfhSet {
    pub features: Vec<FpfhFeature>,
    pub flagged: Vec<bool>,
}

impl FpfhSet {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// ORs additional per-point flags (e.g. low-confidence normals) into the
    /// matching exclusion mask.
    pub fn merge_flags(&mut self, flags: &[bool]) {
        assert_eq!(flags.len(), self.flagged.len());
        for (f, &extra) in self.flagged.iter_mut().zip(flags) {
            *f |= extra;
        }
    }
}

/// Ties in the smaller-angle source selection resolve to the unswapped
/// assignment; without the hysteresis a rotation-level rounding error can
/// flip the branch and move whole histogram counts between mirror bins.
const PAIR_SWAP_TIE: f64 = 1e-9;

/// Darboux angle triple (theta, alpha, phi) with the standard smaller-angle
/// source selection; `None` for coincident points or parallel degeneracy.
fn pair_angles(
    p1: &crate::geometry::Point3,
    n1: &Vector3,
    p2: &crate::geometry::Point3,
    n2: &Vector3,
) -> Option<(f64, f64, f64)> {
    let mut d = p2 - p1;
    let dist = d.norm();
    if dist == 0.0 {
        return None;
    }
    let mut ns = *n1;
    let mut nt = *n2;
    let angle1 = ns.dot(&d) / dist;
    let angle2 = nt.dot(&d) / dist;
    let phi;
    if angle2.abs() - angle1.abs() > PAIR_SWAP_TIE {
        std::mem::swap(&mut ns, &mut nt);
        d = -d;
        phi = -angle2;
    } else {
        phi = angle1;
    }
    let v = d.cross(&ns);
    let v_norm = v.norm();
    if v_norm == 0.0 {
        return None;
    }
    let v = v / v_norm;
    let w = ns.cross(&v);
    Some((w.dot(&nt).atan2(ns.dot(&nt)), v.dot(&nt), phi))
}

fn bin_index(value: f64, min: f64, max: f64) -> usize {
    let t = (value - min) / (max - min);
    ((t * BINS_PER_FEATURE as f64).floor() as isize).clamp(0, BINS_PER_FEATURE as isize - 1)
        as usize
}

pub fn compute_fpfh(cloud: &PointCloud, radius_mm: f64) -> Result<FpfhSet, FpfhError> {
    if cloud.is_empty() {
        return Err(FpfhError::EmptyCloud);
    }
    if !(radius_mm > 0.0) {
        return Err(FpfhError::NonPositiveRadius(radius_mm));
    }
    let normals = cloud.normals().ok_or(FpfhError::MissingNormals)?;
    let points = cloud.points();
    let index = SpatialIndex::build(cloud).expect("non-empty cloud");

    // Neighborhoods exclude the query point itself.
    let neighborhoods: Vec<Vec<(u32, f64)>> = parallel::map_indexed(points.len(), |i| {
        index
            .radius(&points[i], radius_mm)
            .into_iter()
            .filter(|&(j, _)| j != i)
            .map(|(j, d2)| (j as u32, d2.sqrt()))
            .collect()
    });

    let spfh: Vec<[f64; FEATURE_DIM]> = parallel::map_indexed(points.len(), |i| {
        let mut hist = [0.0f64; FEATURE_DIM];
        let mut pairs = 0usize;
        for &(j, _) in &neighborhoods[i] {
            let j = j as usize;
            if let Some((theta, alpha, phi)) =
                pair_angles(&points[i], &normals[i], &points[j], &normals[j])
            {
                hist[bin_index(theta, -std::f64::consts::PI, std::f64::consts::PI)] += 1.0;
                hist[BINS_PER_FEATURE + bin_index(alpha, -1.0, 1.0)] += 1.0;
                hist[2 * BINS_PER_FEATURE + bin_index(phi, -1.0, 1.0)] += 1.0;
                pairs += 1;
            }
        }
        if pairs > 0 {
            let incr = 100.0 / pairs as f64;
            for b in hist.iter_mut() {
                *b *= incr;
            }
        }
        hist
    });

    let features: Vec<FpfhFeature> = parallel::map_indexed(points.len(), |i| {
        let k = neighborhoods[i].len();
        if k == 0 {
            return FpfhFeature::zero();
        }
        let mut bins = spfh[i];
        for &(j, dist) in &neighborhoods[i] {
            if dist > 0.0 {
                let w = 1.0 / (dist * k as f64);
                let other = &spfh[j as usize];
                for b in 0..FEATURE_DIM {
                    bins[b] += other[b] * w;
                }
            }
        }
        for block in 0..3 {
            let range = block * BINS_PER_FEATURE..(block + 1) * BINS_PER_FEATURE;
            let sum: f64 = bins[range.clone()].iter().sum();
            if sum > 0.0 {
                for b in bins[range].iter_mut() {
                    *b *= 100.0 / sum;
                }
            }
        }
        FpfhFeature { bins }
    });

    let flagged = neighborhoods.iter().map(|nb| nb.is_empty()).collect();
    Ok(FpfhSet { features, flagged })
}
