//! DBSCAN over segmented bolt points. Cluster centroids are the bolt
//! positions; the cluster count is discovered, not given, since the number
//! of bolts on a scanned motor is unknown up front.

use std::collections::VecDeque;

use thiserror::Error;

use crate::geometry::{Point3, PointCloud, Vector3};
use crate::index::SpatialIndex;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusterError {
    #[error("no points to cluster")]
    EmptyInput,
    #[error("eps must be positive, got {0}")]
    NonPositiveEps(f64),
    #[error("min_pts must be at least 1")]
    ZeroMinPts,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DbscanParams {
    pub eps_mm: f64,
    pub min_pts: usize,
}

impl Default for DbscanParams {
    fn default() -> Self {
        // Sized for bolt heads ~8-10 mm across at the synthetic scan density.
        DbscanParams {
            eps_mm: 3.0,
            min_pts: 8,
        }
    }
}

/// One clustered bolt: member indices into the input cloud (ascending),
/// the member centroid, and the renormalized mean of member normals when
/// the input carries normals.
#[derive(Debug, Clone, PartialEq)]
pub struct BoltCluster {
    pub member_indices: Vec<u32>,
    pub centroid: Point3,
    pub mean_normal: Option<Vector3>,
}

/// Standard DBSCAN semantics with deterministic, ascending-index expansion:
/// core points have at least `min_pts` neighbors within `eps` (self
/// included); border points join the first cluster that reaches them; noise
/// is whatever no core point reaches. Returns clusters in creation order
/// plus the noise indices.
pub fn dbscan(
    cloud: &PointCloud,
    params: &DbscanParams,
) -> Result<(Vec<BoltCluster>, Vec<u32>), ClusterError> {
    if cloud.is_empty() {
        return Err(ClusterError::EmptyInput);
    }
    if !(params.eps_mm > 0.0) {
        return Err(ClusterError::NonPositiveEps(params.eps_mm));
    }
    if params.min_pts == 0 {
        return Err(ClusterError::ZeroMinPts);
    }

    let n = cloud.len();
    let points = cloud.points();
    let index = SpatialIndex::build(cloud).expect("non-empty cloud");
    // Neighbor lists in ascending index order for deterministic expansion.
    let neighbors = |i: usize| -> Vec<usize> {
        let mut nb: Vec<usize> = index
            .radius(&points[i], params.eps_mm)
            .into_iter()
            .map(|(j, _)| j)
            .collect();
        nb.sort_unstable();
        nb
    };

    let mut cluster_of: Vec<Option<usize>> = vec![None; n];
    let mut visited = vec![false; n];
    let mut next_cluster = 0usize;
    for i in 0..n {
        if visited[i] {
            continue;
        }
        visited[i] = true;
        let nb = neighbors(i);
        if nb.len() < params.min_pts {
            continue;
        }
        let cid = next_cluster;
        next_cluster += 1;
        cluster_of[i] = Some(cid);
        let mut queue: VecDeque<usize> = nb.into();
        while let Some(q) = queue.pop_front() {
            match cluster_of[q] {
                None => cluster_of[q] = Some(cid),
                Some(c) if c == cid => {}
                Some(_) => continue,
            }
            if visited[q] {
                continue;
            }
            visited[q] = true;
            let nb2 = neighbors(q);
            if nb2.len() >= params.min_pts {
                queue.extend(nb2);
            }
        }
    }

    let normals = cloud.normals();
    let mut members: Vec<Vec<u32>> = vec![Vec::new(); next_cluster];
    let mut noise = Vec::new();
    for (i, c) in cluster_of.iter().enumerate() {
        match c {
            Some(cid) => members[*cid].push(i as u32),
            None => noise.push(i as u32),
        }
    }

    let clusters = members
        .into_iter()
        .map(|member_indices| {
            let mut pos_sum = Vector3::zeros();
            let mut normal_sum = Vector3::zeros();
            for &i in &member_indices {
                pos_sum += points[i as usize].coords;
                if let Some(ns) = normals {
                    normal_sum += ns[i as usize];
                }
            }
            let centroid = Point3::from(pos_sum / member_indices.len() as f64);
            let mean_normal = normals.and_then(|_| {
                let norm = normal_sum.norm();
                (norm > 1e-9).then(|| normal_sum / norm)
            });
            BoltCluster {
                member_indices,
                centroid,
                mean_normal,
            }
        })
        .collect();
    Ok((clusters, noise))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CoordinateFrame;
    use crate::reference;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blob(rng: &mut ChaCha8Rng, center: Point3, spread: f64, n: usize) -> Vec<Point3> {
        (0..n)
            .map(|_| {
                center
                    + Vector3::new(
                        rng.random_range(-spread..spread),
                        rng.random_range(-spread..spread),
                        rng.random_range(-spread..spread),
                    )
            })
            .collect()
    }

    #[test]
    fn two_separated_blobs_form_two_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(801);
        let mut points = blob(&mut rng, Point3::origin(), 2.0, 30);
        points.extend(blob(&mut rng, Point3::new(50.0, 0.0, 0.0), 2.0, 30));
        let cloud = PointCloud::new(points, CoordinateFrame::FullModel).unwrap();
        let (clusters, noise) = dbscan(
            &cloud,
            &DbscanParams {
                eps_mm: 3.0,
                min_pts: 5,
            },
        )
        .unwrap();
        assert_eq!(clusters.len(), 2);
        assert!(noise.is_empty());
        assert!((clusters[0].centroid - Point3::origin()).norm() < 1.5);
        assert!((clusters[1].centroid - Point3::new(50.0, 0.0, 0.0)).norm() < 1.5);
    }

    #[test]
    fn isolated_points_are_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(803);
        let mut points = blob(&mut rng, Point3::origin(), 2.0, 30);
        points.extend(blob(&mut rng, Point3::new(50.0, 0.0, 0.0), 2.0, 30));
        for k in 0..5 {
            points.push(Point3::new(-40.0 - 10.0 * k as f64, 80.0, 40.0));
        }
        let cloud = PointCloud::new(points, CoordinateFrame::FullModel).unwrap();
        let (clusters, noise) = dbscan(
            &cloud,
            &DbscanParams {
                eps_mm: 3.0,
                min_pts: 5,
            },
        )
        .unwrap();
        assert_eq!(clusters.len(), 2);
        assert_eq!(noise.len(), 5);
    }

    #[test]
    fn matches_reference_dbscan_on_random_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(805);
        for trial in 0..8 {
            let n = rng.random_range(50..200);
            let points: Vec<Point3> = (0..n)
                .map(|_| reference::random_point(&mut rng, 12.0))
                .collect();
            let eps = rng.random_range(1.0..4.0);
            let min_pts = rng.random_range(2..8);
            let cloud = PointCloud::new(points.clone(), CoordinateFrame::FullModel).unwrap();
            let (clusters, noise) = dbscan(
                &cloud,
                &DbscanParams {
                    eps_mm: eps,
                    min_pts,
                },
            )
            .unwrap();
            let (want, want_count) = reference::reference_dbscan(&points, eps, min_pts);
            assert_eq!(clusters.len(), want_count, "trial {trial}");
            let mut got: Vec<Option<usize>> = vec![None; n];
            for (cid, cluster) in clusters.iter().enumerate() {
                for &i in &cluster.member_indices {
                    got[i as usize] = Some(cid);
                }
            }
            assert_eq!(got, want, "trial {trial}");
            for i in noise {
                assert!(want[i as usize].is_none());
            }
        }
    }

    #[test]
    fn every_cluster_has_a_core_point_and_noise_is_sparse() {
        let mut rng = ChaCha8Rng::seed_from_u64(807);
        let points: Vec<Point3> = (0..150)
            .map(|_| reference::random_point(&mut rng, 10.0))
            .collect();
        let params = DbscanParams {
            eps_mm: 2.5,
            min_pts: 4,
        };
        let cloud = PointCloud::new(points.clone(), CoordinateFrame::FullModel).unwrap();
        let (clusters, noise) = dbscan(&cloud, &params).unwrap();
        let count_within = |i: usize| {
            points
                .iter()
                .filter(|p| (*p - points[i]).norm() <= params.eps_mm)
                .count()
        };
        for cluster in &clusters {
            assert!(cluster
                .member_indices
                .iter()
                .any(|&i| count_within(i as usize) >= params.min_pts));
        }
        for &i in &noise {
            assert!(count_within(i as usize) < params.min_pts);
        }
    }

    #[test]
    fn permutation_yields_identical_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(809);
        let mut points = blob(&mut rng, Point3::origin(), 2.0, 40);
        points.extend(blob(&mut rng, Point3::new(30.0, 0.0, 0.0), 2.0, 40));
        let params = DbscanParams {
            eps_mm: 3.0,
            min_pts: 5,
        };
        let cloud = PointCloud::new(points.clone(), CoordinateFrame::FullModel).unwrap();
        let (clusters_a, _) = dbscan(&cloud, &params).unwrap();

        // Reverse the input order and map the partition back.
        let reversed: Vec<Point3> = points.iter().rev().copied().collect();
        let cloud_b = PointCloud::new(reversed, CoordinateFrame::FullModel).unwrap();
        let (clusters_b, _) = dbscan(&cloud_b, &params).unwrap();
        let n = points.len();
        let to_sets = |clusters: &[BoltCluster], reverse: bool| {
            let mut sets: Vec<Vec<usize>> = clusters
                .iter()
                .map(|c| {
                    let mut v: Vec<usize> = c
                        .member_indices
                        .iter()
                        .map(|&i| if reverse { n - 1 - i as usize } else { i as usize })
                        .collect();
                    v.sort_unstable();
                    v
                })
                .collect();
            sets.sort();
            sets
        };
        assert_eq!(to_sets(&clusters_a, false), to_sets(&clusters_b, true));
    }

    #[test]
    fn empty_input_is_an_error() {
        let cloud = PointCloud::new(vec![], CoordinateFrame::FullModel).unwrap();
        assert_eq!(
            dbscan(&cloud, &DbscanParams::default()),
            Err(ClusterError::EmptyInput)
        );
    }

    #[test]
    fn synthetic_bolts_cluster_to_ground_truth_centers() {
        use crate::geometry::PartLabel;
        for bolts in [4usize, 7, 9, 12] {
            let top = bolts.min(6);
            let spec = crate::synth::MotorSpec {
                bolts_top: top,
                bolts_bottom: bolts - top,
                density_pts_per_mm2: 1.0,
                seed: 900 + bolts as u64,
                ..crate::synth::MotorSpec::default()
            };
            let (cloud, truth) = crate::synth::generate_full_motor(&spec).unwrap();
            let bolt_cloud = cloud.filter_by_label(PartLabel::Bolt);
            let (clusters, _) = dbscan(&bolt_cloud, &DbscanParams::default()).unwrap();
            assert_eq!(clusters.len(), bolts, "{bolts} bolts");
            for truth_center in &truth.bolt_centers {
                let best = clusters
                    .iter()
                    .map(|c| (c.centroid - truth_center).norm())
                    .fold(f64::INFINITY, f64::min);
                assert!(best < 0.5, "centroid error {best} mm");
            }
        }
    }
}
