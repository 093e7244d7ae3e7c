//! Motor frame recovery from segmentation and surface normals.
//!
//! The housing is a cylinder, so its normals plotted on the unit sphere
//! concentrate on a great circle whose plane is perpendicular to the motor
//! axis. A RANSAC fit of that equatorial plane gives the z-axis up to sign;
//! part centroids fix the sign (housing → connector) and the y-axis
//! (housing → solenoid, projected), and the right-hand rule completes x.

use nalgebra::{Matrix3, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{PartLabel, Point3, PointCloud, Vector3};

/// Minimum number of labeled housing points for a usable normal sphere.
pub const MIN_HOUSING_POINTS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignError {
    #[error("cloud has no labels")]
    MissingLabels,
    #[error("cloud has no normals")]
    MissingNormals,
    #[error("only {0} main-housing points, need at least {MIN_HOUSING_POINTS}")]
    TooFewHousingPoints(usize),
    #[error("degenerate input: no valid plane candidate found")]
    DegenerateInput,
    #[error("part {0} has no labeled points")]
    MissingPart(&'static str),
    #[error("solenoid centroid projects onto the z-axis; y-axis undefined")]
    DegenerateSolenoidDirection,
    #[error("connector and housing centroids coincide along z; z sign undefined")]
    DegenerateConnectorDirection,
}

/// Right-handed orthonormal motor triad; the z-axis is the motor orientation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotorFrame {
    pub origin: Point3,
    pub x_axis: Vector3,
    pub y_axis: Vector3,
    pub z_axis: Vector3,
}

impl MotorFrame {
    pub fn identity() -> Self {
        MotorFrame {
            origin: Point3::origin(),
            x_axis: Vector3::x(),
            y_axis: Vector3::y(),
            z_axis: Vector3::z(),
        }
    }

    /// Rotation matrix with the axes as columns.
    pub fn rotation(&self) -> Matrix3<f64> {
        Matrix3::from_columns(&[self.x_axis, self.y_axis, self.z_axis])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacPlaneParams {
    pub iterations: usize,
    /// Inlier gate on |n·v| for unit-sphere points (dimensionless).
    pub inlier_threshold: f64,
    pub seed: u64,
}

impl Default for RansacPlaneParams {
    fn default() -> Self {
        RansacPlaneParams {
            iterations: 1000,
            inlier_threshold: 0.05,
            seed: 0,
        }
    }
}

/// The normals of all points carrying `label`, as points on the unit sphere.
pub fn normal_sphere(cloud: &PointCloud, label: PartLabel) -> Result<Vec<Vector3>, AlignError> {
    let labels = cloud.labels().ok_or(AlignError::MissingLabels)?;
    let normals = cloud.normals().ok_or(AlignError::MissingNormals)?;
    let sphere: Vec<Vector3> = labels
        .iter()
        .zip(normals)
        .filter_map(|(&l, n)| (l == label).then_some(*n))
        .collect();
    if sphere.len() < MIN_HOUSING_POINTS {
        return Err(AlignError::TooFewHousingPoints(sphere.len()));
    }
    Ok(sphere)
}

/// RANSAC fit of the densest plane through the origin of the normal sphere.
/// Returns the plane normal (sign not yet canonicalized).
pub fn ransac_equator(
    sphere_points: &[Vector3],
    params: &RansacPlaneParams,
) -> Result<Vector3, AlignError> {
    if sphere_points.len() < 2 {
        return Err(AlignError::DegenerateInput);
    }
    let n = sphere_points.len();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(usize, Vector3)> = None;

    for _ in 0..params.iterations.max(1) {
        // Two sphere points span the candidate plane; resample bounded times
        // when the pair is near-parallel (cross product vanishes).
        let mut candidate = None;
        for _ in 0..16 {
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            if a == b {
                continue;
            }
            let cross = sphere_points[a].cross(&sphere_points[b]);
            let norm = cross.norm();
            if norm >= 1e-6 {
                candidate = Some(cross / norm);
                break;
            }
        }
        let Some(normal) = candidate else { continue };
        let inliers = sphere_points
            .iter()
            .filter(|v| normal.dot(v).abs() < params.inlier_threshold)
            .count();
        let better = match &best {
            None => true,
            Some((best_count, _)) => inliers > *best_count,
        };
        if better {
            best = Some((inliers, normal));
        }
    }

    let (_, candidate) = best.ok_or(AlignError::DegenerateInput)?;

    // Least-squares refinement: smallest-eigenvalue eigenvector of the
    // inlier covariance about the origin.
    let inliers: Vec<&Vector3> = sphere_points
        .iter()
        .filter(|v| candidate.dot(v).abs() < params.inlier_threshold)
        .collect();
    if inliers.len() < 2 {
        return Ok(candidate);
    }
    let mut cov = Matrix3::zeros();
    for v in &inliers {
        cov += **v * (**v).transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
    let mut refined: Vector3 = eig.eigenvectors.column(order[0]).into();
    refined.normalize_mut();
    // Keep the refined normal on the candidate's hemisphere for determinism.
    if refined.dot(&candidate) < 0.0 {
        refined = -refined;
    }
    Ok(refined)
}

fn label_centroid(cloud: &PointCloud, label: PartLabel) -> Option<Point3> {
    let labels = cloud.labels()?;
    let mut sum = Vector3::zeros();
    let mut count = 0usize;
    for (p, &l) in cloud.points().iter().zip(labels) {
        if l == label {
            sum += p.coords;
            count += 1;
        }
    }
    (count > 0).then(|| Point3::from(sum / count as f64))
}

/// Builds the motor triad from the equator normal and part centroids:
/// z signed toward the connector, y toward the solenoid projected into the
/// xoy plane, x from the right-hand rule, origin at the all-points centroid.
pub fn build_motor_frame(
    cloud: &PointCloud,
    equator_normal: &Vector3,
) -> Result<MotorFrame, AlignError> {
    if cloud.labels().is_none() {
        return Err(AlignError::MissingLabels);
    }
    let c_housing =
        label_centroid(cloud, PartLabel::MainHousing).ok_or(AlignError::MissingPart("MainHousing"))?;
    let c_connector =
        label_centroid(cloud, PartLabel::Connector).ok_or(AlignError::MissingPart("Connector"))?;
    let c_solenoid =
        label_centroid(cloud, PartLabel::Solenoid).ok_or(AlignError::MissingPart("Solenoid"))?;

    let mut z = equator_normal.normalize();
    let toward_connector = (c_connector - c_housing).dot(&z);
    if toward_connector.abs() < 1e-12 {
        return Err(AlignError::DegenerateConnectorDirection);
    }
    if toward_connector < 0.0 {
        z = -z;
    }

    let housing_to_solenoid = c_solenoid - c_housing;
    let mut y = housing_to_solenoid - z * housing_to_solenoid.dot(&z);
    let y_norm = y.norm();
    if y_norm < 1e-6 {
        return Err(AlignError::DegenerateSolenoidDirection);
    }
    y /= y_norm;
    // Gram-Schmidt anchored on z; y is already orthogonal by construction
    // but centroid noise warrants an exact re-orthogonalization.
    y = (y - z * y.dot(&z)).normalize();
    let x = y.cross(&z);

    let origin = cloud.centroid().expect("non-empty labeled cloud");
    Ok(MotorFrame {
        origin,
        x_axis: x,
        y_axis: y,
        z_axis: z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CoordinateFrame;
    use rand::Rng;

    #[test]
    fn noise_free_equator_recovers_plane() {
        let mut pts = Vec::new();
        for i in 0..500 {
            let theta = i as f64 / 500.0 * std::f64::consts::TAU;
            pts.push(Vector3::new(theta.cos(), theta.sin(), 0.0));
        }
        let normal = ransac_equator(&pts, &RansacPlaneParams::default()).unwrap();
        assert!(normal.z.abs() > 1.0 - 1e-6);
        assert!(normal.x.abs() < 1e-6 && normal.y.abs() < 1e-6);
    }

    #[test]
    fn equator_with_outliers_within_half_degree() {
        let mut rng = ChaCha8Rng::seed_from_u64(701);
        let mut pts = Vec::new();
        for _ in 0..800 {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            pts.push(Vector3::new(theta.cos(), theta.sin(), 0.0));
        }
        for _ in 0..200 {
            pts.push(crate::reference::random_unit_vector(&mut rng));
        }
        let params = RansacPlaneParams {
            iterations: 500,
            inlier_threshold: 0.05,
            seed: 9,
        };
        let normal = ransac_equator(&pts, &params).unwrap();
        let angle = normal.dot(&Vector3::z()).abs().clamp(0.0, 1.0).acos();
        assert!(angle.to_degrees() < 0.5, "angle {} deg", angle.to_degrees());
    }

    #[test]
    fn antipodal_points_are_degenerate() {
        let pts = vec![Vector3::x(), -Vector3::x()];
        assert_eq!(
            ransac_equator(&pts, &RansacPlaneParams::default()),
            Err(AlignError::DegenerateInput)
        );
    }

    #[test]
    fn ransac_is_deterministic_under_fixed_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(703);
        let pts: Vec<Vector3> = (0..300)
            .map(|_| crate::reference::random_unit_vector(&mut rng))
            .collect();
        let params = RansacPlaneParams {
            iterations: 200,
            inlier_threshold: 0.2,
            seed: 77,
        };
        let a = ransac_equator(&pts, &params).unwrap();
        let b = ransac_equator(&pts, &params).unwrap();
        assert_eq!(a, b);
    }

    fn toy_labeled_motor() -> PointCloud {
        // Minimal labeled stand-in: housing ring at origin, connector blob
        // at +z, solenoid blob at +y.
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for i in 0..200 {
            let theta = i as f64 / 200.0 * std::f64::consts::TAU;
            points.push(Point3::new(30.0 * theta.cos(), 30.0 * theta.sin(), 0.0));
            labels.push(PartLabel::MainHousing);
        }
        for i in 0..20 {
            points.push(Point3::new(i as f64 * 0.1, 0.0, 60.0));
            labels.push(PartLabel::Connector);
        }
        for i in 0..20 {
            points.push(Point3::new(i as f64 * 0.1, 45.0, 0.0));
            labels.push(PartLabel::Solenoid);
        }
        PointCloud::new(points, CoordinateFrame::FullModel)
            .unwrap()
            .with_labels(labels)
            .unwrap()
    }

    #[test]
    fn motor_frame_axes_are_orthonormal_right_handed() {
        let cloud = toy_labeled_motor();
        let frame = build_motor_frame(&cloud, &Vector3::z()).unwrap();
        assert!((frame.x_axis.cross(&frame.y_axis) - frame.z_axis).norm() < 1e-9);
        assert!(frame.x_axis.dot(&frame.y_axis).abs() < 1e-9);
        assert!(frame.y_axis.dot(&frame.z_axis).abs() < 1e-9);
        assert!(frame.x_axis.dot(&frame.z_axis).abs() < 1e-9);
        // z toward connector, y toward solenoid.
        assert!(frame.z_axis.z > 0.99);
        assert!(frame.y_axis.y > 0.99);
    }

    #[test]
    fn z_sign_flips_toward_connector() {
        let cloud = toy_labeled_motor();
        let frame = build_motor_frame(&cloud, &(-Vector3::z())).unwrap();
        assert!(frame.z_axis.z > 0.99);
    }

    #[test]
    fn missing_part_is_reported() {
        let points = vec![Point3::origin(); 4];
        let labels = vec![
            PartLabel::MainHousing,
            PartLabel::MainHousing,
            PartLabel::Solenoid,
            PartLabel::Solenoid,
        ];
        let cloud = PointCloud::new(points, CoordinateFrame::FullModel)
            .unwrap()
            .with_labels(labels)
            .unwrap();
        assert_eq!(
            build_motor_frame(&cloud, &Vector3::z()),
            Err(AlignError::MissingPart("Connector"))
        );
    }

    #[test]
    fn solenoid_on_axis_is_degenerate() {
        let mut points = vec![];
        let mut labels = vec![];
        for i in 0..3 {
            points.push(Point3::new(i as f64, 0.0, 0.0));
            labels.push(PartLabel::MainHousing);
        }
        points.push(Point3::new(1.0, 0.0, 50.0));
        labels.push(PartLabel::Connector);
        // Solenoid centroid right above the housing centroid.
        points.push(Point3::new(1.0, 0.0, 30.0));
        labels.push(PartLabel::Solenoid);
        let cloud = PointCloud::new(points, CoordinateFrame::FullModel)
            .unwrap()
            .with_labels(labels)
            .unwrap();
        assert_eq!(
            build_motor_frame(&cloud, &Vector3::z()),
            Err(AlignError::DegenerateSolenoidDirection)
        );
    }

    #[test]
    fn normal_sphere_requires_enough_housing_points() {
        let points = vec![Point3::origin(); 5];
        let normals = vec![Vector3::z(); 5];
        let labels = vec![PartLabel::MainHousing; 5];
        let cloud = PointCloud::new(points, CoordinateFrame::FullModel)
            .unwrap()
            .with_normals(normals)
            .unwrap()
            .with_labels(labels)
            .unwrap();
        assert_eq!(
            normal_sphere(&cloud, PartLabel::MainHousing),
            Err(AlignError::TooFewHousingPoints(5))
        );
    }
}
