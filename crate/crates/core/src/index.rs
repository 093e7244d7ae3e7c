//! Exact k-nearest-neighbor and radius search over a point cloud.
//!
//! A median-split kd-tree whose query results are exactly those of a brute
//! force scan: hits sorted by (squared distance, index ascending), radius
//! inclusive. Ties at the k-th distance resolve to the lower point index, so
//! pruning is strict (a subtree is skipped only when the splitting plane is
//! strictly farther than the current worst candidate).

use crate::geometry::{GeomError, Point3, PointCloud};

#[derive(Debug, Clone)]
struct Node {
    /// Index into the owned point array.
    point: u32,
    axis: u8,
    left: i32,
    right: i32,
}

const NO_CHILD: i32 = -1;

/// Immutable spatial search structure; read-only after build, safe to query
/// from multiple threads.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    points: Vec<Point3>,
    nodes: Vec<Node>,
    root: i32,
}

impl SpatialIndex {
    pub fn build(cloud: &PointCloud) -> Result<Self, GeomError> {
        Self::from_points(cloud.points().to_vec())
    }

    pub fn from_points(points: Vec<Point3>) -> Result<Self, GeomError> {
        if points.is_empty() {
            return Err(GeomError::EmptyCloud);
        }
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::with_capacity(points.len());
        let root = build_recursive(&points, &mut order, &mut nodes);
        Ok(SpatialIndex {
            points,
            nodes,
            root,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    /// The k nearest points to `query`, sorted by (squared distance, index).
    /// Returns fewer than `k` entries only when the cloud is smaller than `k`.
    pub fn k_nearest(&self, query: &Point3, k: usize) -> Vec<(usize, f64)> {
        if k == 0 {
            return Vec::new();
        }
        let mut best: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
        self.knn_recursive(self.root, query, k, &mut best);
        best.into_iter().map(|(d2, i)| (i as usize, d2)).collect()
    }

    fn knn_recursive(&self, node: i32, query: &Point3, k: usize, best: &mut Vec<(f64, u32)>) {
        if node == NO_CHILD {
            return;
        }
        let n = &self.nodes[node as usize];
        let p = &self.points[n.point as usize];
        let d2 = (p - query).norm_squared();
        push_candidate(best, k, (d2, n.point));

        let axis = n.axis as usize;
        let delta = query[axis] - p[axis];
        let (near, far) = if delta < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.knn_recursive(near, query, k, best);
        // Visit the far side unless the splitting plane is strictly beyond
        // the current worst: equal distances may still win on index order.
        let plane_d2 = delta * delta;
        if best.len() < k || plane_d2 <= best.last().unwrap().0 {
            self.knn_recursive(far, query, k, best);
        }
    }

    /// All points within `radius` (inclusive), sorted by (squared distance,
    /// index ascending).
    pub fn radius(&self, query: &Point3, radius: f64) -> Vec<(usize, f64)> {
        let mut hits: Vec<(f64, u32)> = Vec::new();
        if radius >= 0.0 {
            self.radius_recursive(self.root, query, radius * radius, &mut hits);
        }
        hits.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        hits.into_iter().map(|(d2, i)| (i as usize, d2)).collect()
    }

    fn radius_recursive(&self, node: i32, query: &Point3, r2: f64, hits: &mut Vec<(f64, u32)>) {
        if node == NO_CHILD {
            return;
        }
        let n = &self.nodes[node as usize];
        let p = &self.points[n.point as usize];
        let d2 = (p - query).norm_squared();
        if d2 <= r2 {
            hits.push((d2, n.point));
        }
        let axis = n.axis as usize;
        let delta = query[axis] - p[axis];
        let (near, far) = if delta < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.radius_recursive(near, query, r2, hits);
        if delta * delta <= r2 {
            self.radius_recursive(far, query, r2, hits);
        }
    }

    /// Nearest point within `d_max` (inclusive), if any; ties break to the
    /// lower index. The workhorse of ICP correspondence search.
    pub fn nearest_within(&self, query: &Point3, d_max: f64) -> Option<(usize, f64)> {
        if d_max < 0.0 {
            return None;
        }
        let mut best: Option<(f64, u32)> = None;
        self.nearest_recursive(self.root, query, d_max * d_max, &mut best);
        best.map(|(d2, i)| (i as usize, d2))
    }

    fn nearest_recursive(
        &self,
        node: i32,
        query: &Point3,
        limit2: f64,
        best: &mut Option<(f64, u32)>,
    ) {
        if node == NO_CHILD {
            return;
        }
        let n = &self.nodes[node as usize];
        let p = &self.points[n.point as usize];
        let d2 = (p - query).norm_squared();
        if d2 <= limit2 {
            let candidate = (d2, n.point);
            match best {
                None => *best = Some(candidate),
                Some(cur) if candidate < *cur => *best = Some(candidate),
                _ => {}
            }
        }
        let axis = n.axis as usize;
        let delta = query[axis] - p[axis];
        let (near, far) = if delta < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.nearest_recursive(near, query, limit2, best);
        let bound = best.map(|(d2, _)| d2).unwrap_or(limit2);
        if delta * delta <= bound {
            self.nearest_recursive(far, query, limit2, best);
        }
    }
}

/// Keeps `best` sorted ascending by (distance, index) and at most `k` long.
fn push_candidate(best: &mut Vec<(f64, u32)>, k: usize, candidate: (f64, u32)) {
    if best.len() == k && candidate >= *best.last().unwrap() {
        return;
    }
    let pos = best.partition_point(|c| *c < candidate);
    best.insert(pos, candidate);
    best.truncate(k);
}

fn build_recursive(points: &[Point3], order: &mut [u32], nodes: &mut Vec<Node>) -> i32 {
    if order.is_empty() {
        return NO_CHILD;
    }
    // Split along the axis of largest extent for balanced geometry.
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in order.iter() {
        let p = &points[i as usize];
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let axis = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).partial_cmp(&(hi[b] - lo[b])).unwrap())
        .unwrap();

    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        let pa = points[a as usize][axis];
        let pb = points[b as usize][axis];
        pa.partial_cmp(&pb).unwrap().then(a.cmp(&b))
    });
    let point = order[mid];
    let node_slot = nodes.len();
    nodes.push(Node {
        point,
        axis: axis as u8,
        left: NO_CHILD,
        right: NO_CHILD,
    });
    let (left_slice, rest) = order.split_at_mut(mid);
    let right_slice = &mut rest[1..];
    let left = build_recursive(points, left_slice, nodes);
    let right = build_recursive(points, right_slice, nodes);
    nodes[node_slot].left = left;
    nodes[node_slot].right = right;
    node_slot as i32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CoordinateFrame;
    use crate::reference;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> PointCloud {
        let points = (0..n)
            .map(|_| reference::random_point(rng, extent))
            .collect();
        PointCloud::new(points, CoordinateFrame::Camera).unwrap()
    }

    #[test]
    fn single_point_is_always_nearest() {
        let cloud = PointCloud::new(
            vec![Point3::new(1.0, 2.0, 3.0)],
            CoordinateFrame::Camera,
        )
        .unwrap();
        let index = SpatialIndex::build(&cloud).unwrap();
        let hits = index.k_nearest(&Point3::new(-50.0, 10.0, 0.0), 1);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].0, 0);
    }

    #[test]
    fn empty_cloud_rejected() {
        let cloud = PointCloud::new(vec![], CoordinateFrame::Camera).unwrap();
        assert!(matches!(
            SpatialIndex::build(&cloud),
            Err(GeomError::EmptyCloud)
        ));
    }

    #[test]
    fn knn_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let cloud = random_cloud(&mut rng, 200, 50.0);
        let index = SpatialIndex::build(&cloud).unwrap();
        for _ in 0..50 {
            let q = reference::random_point(&mut rng, 60.0);
            let got = index.k_nearest(&q, 5);
            let want = reference::brute_force_k_nearest(cloud.points(), &q, 5);
            assert_eq!(
                got.iter().map(|h| h.0).collect::<Vec<_>>(),
                want.iter().map(|h| h.0).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn radius_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        let cloud = random_cloud(&mut rng, 300, 20.0);
        let index = SpatialIndex::build(&cloud).unwrap();
        for _ in 0..50 {
            let q = reference::random_point(&mut rng, 25.0);
            let r = rng.random_range(0.5..15.0);
            let got = index.radius(&q, r);
            let want = reference::brute_force_radius(cloud.points(), &q, r);
            assert_eq!(got, want);
        }
    }

    #[test]
    fn zero_radius_matches_exact_coordinates_only() {
        let points = vec![
            Point3::new(1.0, 1.0, 1.0),
            Point3::new(1.0, 1.0, 1.0),
            Point3::new(2.0, 1.0, 1.0),
        ];
        let cloud = PointCloud::new(points, CoordinateFrame::Camera).unwrap();
        let index = SpatialIndex::build(&cloud).unwrap();
        let hits = index.radius(&Point3::new(1.0, 1.0, 1.0), 0.0);
        assert_eq!(hits.iter().map(|h| h.0).collect::<Vec<_>>(), vec![0, 1]);
        assert!(index.radius(&Point3::new(1.5, 1.0, 1.0), 0.0).is_empty());
    }

    #[test]
    fn knn_ties_break_by_index() {
        // Four points equidistant from the origin query.
        let points = vec![
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(-1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(0.0, -1.0, 0.0),
        ];
        let cloud = PointCloud::new(points, CoordinateFrame::Camera).unwrap();
        let index = SpatialIndex::build(&cloud).unwrap();
        let hits = index.k_nearest(&Point3::origin(), 2);
        assert_eq!(hits.iter().map(|h| h.0).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn nearest_within_agrees_with_knn() {
        let mut rng = ChaCha8Rng::seed_from_u64(107);
        let cloud = random_cloud(&mut rng, 400, 30.0);
        let index = SpatialIndex::build(&cloud).unwrap();
        for _ in 0..200 {
            let q = reference::random_point(&mut rng, 40.0);
            let d_max = rng.random_range(0.1..10.0);
            let got = index.nearest_within(&q, d_max);
            let brute = reference::brute_force_radius(cloud.points(), &q, d_max);
            assert_eq!(got, brute.first().copied());
        }
    }

    #[test]
    fn k_larger_than_cloud_returns_all() {
        let mut rng = ChaCha8Rng::seed_from_u64(109);
        let cloud = random_cloud(&mut rng, 7, 10.0);
        let index = SpatialIndex::build(&cloud).unwrap();
        let hits = index.k_nearest(&Point3::origin(), 20);
        assert_eq!(hits.len(), 7);
    }
}
