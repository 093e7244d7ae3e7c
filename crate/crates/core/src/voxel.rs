//! Voxel-grid downsampling.

use std::collections::HashMap;

use crate::geometry::{GeomError, PartLabel, Point3, PointCloud, Vector3};

struct VoxelAcc {
    sum: Vector3,
    count: usize,
    label_counts: [u32; 8],
    first_index: usize,
}

/// One representative point per occupied voxel: the centroid of its members.
/// Labels propagate by majority vote (ties to the lowest label ordinal);
/// normals are dropped and left to downstream re-estimation. Output order is
/// deterministic: voxels sorted by first occurrence in the input.
pub fn voxel_downsample(cloud: &PointCloud, voxel_mm: f64) -> Result<PointCloud, GeomError> {
    if !(voxel_mm > 0.0) {
        return Err(GeomError::NonPositiveVoxel(voxel_mm));
    }
    if cloud.is_empty() {
        return Err(GeomError::EmptyCloud);
    }

    let mut grid: HashMap<(i64, i64, i64), VoxelAcc> = HashMap::new();
    let labels = cloud.labels();
    for (i, p) in cloud.points().iter().enumerate() {
        let key = (
            (p.x / voxel_mm).floor() as i64,
            (p.y / voxel_mm).floor() as i64,
            (p.z / voxel_mm).floor() as i64,
        );
        let acc = grid.entry(key).or_insert(VoxelAcc {
            sum: Vector3::zeros(),
            count: 0,
            label_counts: [0; 8],
            first_index: i,
        });
        acc.sum += p.coords;
        acc.count += 1;
        if let Some(ls) = labels {
            acc.label_counts[ls[i].as_u8() as usize] += 1;
        }
    }

    let mut cells: Vec<VoxelAcc> = grid.into_values().collect();
    cells.sort_by_key(|c| c.first_index);

    let points: Vec<Point3> = cells
        .iter()
        .map(|c| Point3::from(c.sum / c.count as f64))
        .collect();
    let out = PointCloud::new(points, cloud.frame())?;
    if labels.is_some() {
        let voted: Vec<PartLabel> = cells
            .iter()
            .map(|c| {
                let best = c
                    .label_counts
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                    .unwrap()
                    .0;
                PartLabel::from_u8(best as u8).unwrap()
            })
            .collect();
        out.with_labels(voted)
    } else {
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CoordinateFrame;
    use crate::reference;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    #[test]
    fn voxel_larger_than_bbox_gives_single_centroid() {
        let points = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 2.0, 0.0),
        ];
        let cloud = PointCloud::new(points, CoordinateFrame::Camera).unwrap();
        let out = voxel_downsample(&cloud, 100.0).unwrap();
        assert_eq!(out.len(), 1);
        let c = out.points()[0];
        assert!((c - Point3::new(1.0 / 3.0, 2.0 / 3.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn unit_cube_corners_survive_half_voxel() {
        let mut points = Vec::new();
        for x in [0.25, 0.75] {
            for y in [0.25, 0.75] {
                for z in [0.25, 0.75] {
                    points.push(Point3::new(x, y, z));
                }
            }
        }
        let cloud = PointCloud::new(points, CoordinateFrame::Camera).unwrap();
        let out = voxel_downsample(&cloud, 0.5).unwrap();
        assert_eq!(out.len(), 8);
    }

    #[test]
    fn rejects_nonpositive_voxel() {
        let cloud =
            PointCloud::new(vec![Point3::origin()], CoordinateFrame::Camera).unwrap();
        assert!(matches!(
            voxel_downsample(&cloud, 0.0),
            Err(GeomError::NonPositiveVoxel(_))
        ));
    }

    #[test]
    fn every_output_point_is_its_voxel_centroid() {
        let mut rng = ChaCha8Rng::seed_from_u64(301);
        let voxel = 2.0;
        let points: Vec<Point3> = (0..10_000)
            .map(|_| reference::random_point(&mut rng, 40.0))
            .collect();
        let cloud = PointCloud::new(points.clone(), CoordinateFrame::Camera).unwrap();
        let out = voxel_downsample(&cloud, voxel).unwrap();

        // Independent hash-grid recomputation.
        let mut grid: HashMap<(i64, i64, i64), (Vector3, usize)> = HashMap::new();
        for p in &points {
            let key = (
                (p.x / voxel).floor() as i64,
                (p.y / voxel).floor() as i64,
                (p.z / voxel).floor() as i64,
            );
            let e = grid.entry(key).or_insert((Vector3::zeros(), 0));
            e.0 += p.coords;
            e.1 += 1;
        }
        assert_eq!(out.len(), grid.len());
        for p in out.points() {
            let key = (
                (p.x / voxel).floor() as i64,
                (p.y / voxel).floor() as i64,
                (p.z / voxel).floor() as i64,
            );
            let (sum, count) = grid.get(&key).expect("output voxel exists in oracle grid");
            let centroid = Point3::from(sum / *count as f64);
            assert!((p - centroid).norm() < 1e-9);
        }
    }

    #[test]
    fn label_majority_with_ordinal_tiebreak() {
        let points = vec![
            Point3::new(0.1, 0.1, 0.1),
            Point3::new(0.2, 0.2, 0.2),
            Point3::new(0.3, 0.3, 0.3),
            Point3::new(0.4, 0.4, 0.4),
        ];
        let labels = vec![
            PartLabel::Solenoid,
            PartLabel::Bolt,
            PartLabel::Solenoid,
            PartLabel::Bolt,
        ];
        let cloud = PointCloud::new(points, CoordinateFrame::Camera)
            .unwrap()
            .with_labels(labels)
            .unwrap();
        let out = voxel_downsample(&cloud, 10.0).unwrap();
        // 2-2 tie between Bolt (0) and Solenoid (3): lowest ordinal wins.
        assert_eq!(out.labels().unwrap()[0], PartLabel::Bolt);
    }
}
