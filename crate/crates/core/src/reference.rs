//! Deliberately naive reference implementations used as oracles by the test
//! suite. Everything here is a literal restatement of the definitions with
//! no spatial index, no reuse of the optimized code paths, and no shortcuts.

use nalgebra::{Matrix3, Matrix4, Vector4};
use rand::Rng;

use crate::geometry::{Point3, PointCloud, Pose6D, RigidTransform, Vector3};

/// Brute-force k-nearest-neighbor scan: sorted by (squared distance,
/// index ascending), first `k` entries.
pub fn brute_force_k_nearest(points: &[Point3], query: &Point3, k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (i, (p - query).norm_squared()))
        .collect();
    all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Brute-force radius scan (inclusive), sorted by (squared distance, index).
pub fn brute_force_radius(points: &[Point3], query: &Point3, radius: f64) -> Vec<(usize, f64)> {
    let r2 = radius * radius;
    let mut hits: Vec<(usize, f64)> = points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let d2 = (p - query).norm_squared();
            (d2 <= r2).then_some((i, d2))
        })
        .collect();
    hits.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    hits
}

/// Literal O(n²) DBSCAN with ascending-index expansion order. Returns the
/// cluster id per point (`None` = noise) and the number of clusters.
pub fn reference_dbscan(
    points: &[Point3],
    eps: f64,
    min_pts: usize,
) -> (Vec<Option<usize>>, usize) {
    let n = points.len();
    let eps2 = eps * eps;
    let neighbors = |i: usize| -> Vec<usize> {
        (0..n)
            .filter(|&j| (points[j] - points[i]).norm_squared() <= eps2)
            .collect()
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
        if nb.len() < min_pts {
            continue; // noise unless claimed later
        }
        let cid = next_cluster;
        next_cluster += 1;
        cluster_of[i] = Some(cid);
        let mut queue: std::collections::VecDeque<usize> = nb.into();
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
            if nb2.len() >= min_pts {
                queue.extend(nb2);
            }
        }
    }
    (cluster_of, next_cluster)
}

/// Darboux-frame angle triple for one ordered point/normal pair, with the
/// standard smaller-angle source selection. Returns (theta, alpha, phi).
fn pair_angles(
    p1: &Point3,
    n1: &Vector3,
    p2: &Point3,
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
    // Same tie hysteresis as the production rule so oracle and
    // implementation agree bin-for-bin on borderline pairs.
    if angle2.abs() - angle1.abs() > 1e-9 {
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
    let alpha = v.dot(&nt);
    let theta = w.dot(&nt).atan2(ns.dot(&nt));
    Some((theta, alpha, phi))
}

fn bin_index(value: f64, min: f64, max: f64) -> usize {
    let t = (value - min) / (max - min);
    ((t * 11.0).floor() as isize).clamp(0, 10) as usize
}

/// Unoptimized double-loop FPFH: brute-force neighborhoods, literal SPFH
/// accumulation and neighbor-weighted aggregation.
pub fn naive_fpfh(cloud: &PointCloud, radius: f64) -> Vec<[f64; 33]> {
    let points = cloud.points();
    let normals = cloud.normals().expect("naive_fpfh needs normals");
    let n = points.len();
    let r2 = radius * radius;

    let mut neighborhoods: Vec<Vec<usize>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut nb = Vec::new();
        for j in 0..n {
            if i != j && (points[j] - points[i]).norm_squared() <= r2 {
                nb.push(j);
            }
        }
        neighborhoods.push(nb);
    }

    let mut spfh = vec![[0.0f64; 33]; n];
    for i in 0..n {
        let mut pairs = 0usize;
        let mut hist = [0.0f64; 33];
        for &j in &neighborhoods[i] {
            if let Some((theta, alpha, phi)) =
                pair_angles(&points[i], &normals[i], &points[j], &normals[j])
            {
                hist[bin_index(theta, -std::f64::consts::PI, std::f64::consts::PI)] += 1.0;
                hist[11 + bin_index(alpha, -1.0, 1.0)] += 1.0;
                hist[22 + bin_index(phi, -1.0, 1.0)] += 1.0;
                pairs += 1;
            }
        }
        if pairs > 0 {
            let incr = 100.0 / pairs as f64;
            for b in hist.iter_mut() {
                *b *= incr;
            }
        }
        spfh[i] = hist;
    }

    let mut fpfh = vec![[0.0f64; 33]; n];
    for i in 0..n {
        let mut acc = spfh[i];
        let k = neighborhoods[i].len();
        if k == 0 {
            fpfh[i] = [0.0; 33];
            continue;
        }
        for &j in &neighborhoods[i] {
            let dist = (points[j] - points[i]).norm();
            if dist > 0.0 {
                for b in 0..33 {
                    acc[b] += spfh[j][b] / dist / k as f64;
                }
            }
        }
        for block in 0..3 {
            let sum: f64 = acc[block * 11..(block + 1) * 11].iter().sum();
            if sum > 0.0 {
                for b in acc[block * 11..(block + 1) * 11].iter_mut() {
                    *b *= 100.0 / sum;
                }
            }
        }
        fpfh[i] = acc;
    }
    fpfh
}

/// Pose transport computed through an explicit 4×4 homogeneous product,
/// embedding the axis as the z-column of a completed rotation.
pub fn pose_transport_homogeneous(t: &RigidTransform, pose: &Pose6D) -> (Point3, Vector3) {
    let z = pose.direction();
    // Complete z to an orthonormal basis for the embedded rotation block.
    let seed = if z.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let x = (seed - z * seed.dot(&z)).normalize();
    let y = z.cross(&x);
    let mut bolt = Matrix4::identity();
    bolt.fixed_view_mut::<3, 1>(0, 0).copy_from(&x);
    bolt.fixed_view_mut::<3, 1>(0, 1).copy_from(&y);
    bolt.fixed_view_mut::<3, 1>(0, 2).copy_from(&z);
    bolt.fixed_view_mut::<3, 1>(0, 3)
        .copy_from(&pose.position().coords);

    let product = t.to_matrix4() * bolt;
    let pos = Point3::new(product[(0, 3)], product[(1, 3)], product[(2, 3)]);
    let dir = Vector3::new(product[(0, 2)], product[(1, 2)], product[(2, 2)]);
    let homog = product * Vector4::new(0.0, 0.0, 0.0, 1.0);
    debug_assert!((homog.w - 1.0).abs() < 1e-12);
    (pos, dir)
}

pub fn random_point<R: Rng>(rng: &mut R, extent: f64) -> Point3 {
    Point3::new(
        rng.random_range(-extent..extent),
        rng.random_range(-extent..extent),
        rng.random_range(-extent..extent),
    )
}

pub fn random_unit_vector<R: Rng>(rng: &mut R) -> Vector3 {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Uniform random rotation (quaternion method) with a bounded translation.
pub fn random_rigid_transform<R: Rng>(rng: &mut R, max_translation: f64) -> RigidTransform {
    RigidTransform::new(
        random_rotation(rng),
        Vector3::new(
            rng.random_range(-max_translation..max_translation),
            rng.random_range(-max_translation..max_translation),
            rng.random_range(-max_translation..max_translation),
        ),
    )
    .expect("generated rotation is orthonormal")
}

pub fn random_rotation<R: Rng>(rng: &mut R) -> Matrix3<f64> {
    // Normalized 4-vector of gaussians is uniform on the quaternion sphere.
    let q: [f64; 4] = std::array::from_fn(|_| {
        // Box-Muller keeps this module free of distribution dependencies.
        let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        (-2.0 * u1.ln()).sqrt() * u2.cos()
    });
    let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}
