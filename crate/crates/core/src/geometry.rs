//! Core geometric types: point clouds, coordinate frames, SE(3) transforms
//! and 6D poses. All distances are in millimetres.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A 3D point, coordinates in millimetres.
pub type Point3 = nalgebra::Point3<f64>;
/// A 3D vector, millimetres (or unitless for directions).
pub type Vector3 = nalgebra::Vector3<f64>;

/// Orthonormality tolerance for rotation matrices.
pub const ROTATION_TOL: f64 = 1e-9;
/// Drift threshold above which compositions re-orthonormalize.
const REORTHO_DRIFT: f64 = 1e-12;
/// Unit-length tolerance for stored normals.
pub const NORMAL_UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("rotation matrix is not orthonormal (max deviation {0:.3e})")]
    NotOrthonormal(f64),
    #[error("rotation matrix determinant is {0}, expected +1")]
    NotProperRotation(f64),
    #[error("non-finite coordinate at point {0}")]
    NonFinite(usize),
    #[error("normal {0} is not unit length")]
    NotUnitNormal(usize),
    #[error("{what} has length {got}, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("direction vector has near-zero length")]
    ZeroDirection,
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("voxel size must be positive, got {0}")]
    NonPositiveVoxel(f64),
    #[error("pose is in frame {pose:?} but transform maps from {expected:?}")]
    FrameMismatch {
        pose: CoordinateFrame,
        expected: CoordinateFrame,
    },
    #[error("cannot chain transform ending in {lhs:?} after one starting in {rhs:?}")]
    FrameChainMismatch {
        lhs: CoordinateFrame,
        rhs: CoordinateFrame,
    },
}

/// The three coordinate systems of the pipeline: robot base, scanning
/// camera, and the frame the full motor model is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CoordinateFrame {
    Robot,
    Camera,
    FullModel,
}

impl CoordinateFrame {
    pub fn name(self) -> &'static str {
        match self {
            CoordinateFrame::Robot => "Robot",
            CoordinateFrame::Camera => "Camera",
            CoordinateFrame::FullModel => "FullModel",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "Robot" => Some(CoordinateFrame::Robot),
            "Camera" => Some(CoordinateFrame::Camera),
            "FullModel" => Some(CoordinateFrame::FullModel),
            _ => None,
        }
    }
}

/// Semantic point labels. The first six are the motor part classes, the
/// last two are the scene-level classes of binary segmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum PartLabel {
    Bolt = 0,
    MainHousing = 1,
    Connector = 2,
    Solenoid = 3,
    Other1 = 4,
    Other2 = 5,
    Clamp = 6,
    MotorForeground = 7,
}

impl PartLabel {
    pub const ALL: [PartLabel; 8] = [
        PartLabel::Bolt,
        PartLabel::MainHousing,
        PartLabel::Connector,
        PartLabel::Solenoid,
        PartLabel::Other1,
        PartLabel::Other2,
        PartLabel::Clamp,
        PartLabel::MotorForeground,
    ];

    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.get(v as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            PartLabel::Bolt => "Bolt",
            PartLabel::MainHousing => "MainHousing",
            PartLabel::Connector => "Connector",
            PartLabel::Solenoid => "Solenoid",
            PartLabel::Other1 => "Other1",
            PartLabel::Other2 => "Other2",
            PartLabel::Clamp => "Clamp",
            PartLabel::MotorForeground => "MotorForeground",
        }
    }
}

/// An immutable point cloud: positions plus optional parallel unit normals
/// and part labels, tagged with the coordinate frame it lives in.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
    normals: Option<Vec<Vector3>>,
    labels: Option<Vec<PartLabel>>,
    frame: CoordinateFrame,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>, frame: CoordinateFrame) -> Result<Self, GeomError> {
        for (i, p) in points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(GeomError::NonFinite(i));
            }
        }
        Ok(PointCloud {
            points,
            normals: None,
            labels: None,
            frame,
        })
    }

    pub fn with_normals(mut self, normals: Vec<Vector3>) -> Result<Self, GeomError> {
        if normals.len() != self.points.len() {
            return Err(GeomError::LengthMismatch {
                what: "normals",
                got: normals.len(),
                expected: self.points.len(),
            });
        }
        for (i, n) in normals.iter().enumerate() {
            if (n.norm() - 1.0).abs() > NORMAL_UNIT_TOL {
                return Err(GeomError::NotUnitNormal(i));
            }
        }
        self.normals = Some(normals);
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Vec<PartLabel>) -> Result<Self, GeomError> {
        if labels.len() != self.points.len() {
            return Err(GeomError::LengthMismatch {
                what: "labels",
                got: labels.len(),
                expected: self.points.len(),
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn normals(&self) -> Option<&[Vector3]> {
        self.normals.as_deref()
    }

    pub fn labels(&self) -> Option<&[PartLabel]> {
        self.labels.as_deref()
    }

    pub fn frame(&self) -> CoordinateFrame {
        self.frame
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Option<Point3> {
        if self.points.is_empty() {
            return None;
        }
        let sum = self
            .points
            .iter()
            .fold(Vector3::zeros(), |acc, p| acc + p.coords);
        Some(Point3::from(sum / self.points.len() as f64))
    }

    /// Applies a rigid transform to positions and normals. The frame tag is
    /// unchanged; use [`FramedTransform::apply_cloud`] for frame-aware moves.
    pub fn transformed(&self, t: &RigidTransform) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| t.apply_point(p)).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|ns| ns.iter().map(|n| t.apply_vector(n)).collect()),
            labels: self.labels.clone(),
            frame: self.frame,
        }
    }

    /// New cloud containing the given point indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|ns| indices.iter().map(|&i| ns[i]).collect()),
            labels: self
                .labels
                .as_ref()
                .map(|ls| indices.iter().map(|&i| ls[i]).collect()),
            frame: self.frame,
        }
    }

    /// Indices of all points carrying the given label (empty if unlabeled).
    pub fn indices_with_label(&self, label: PartLabel) -> Vec<usize> {
        match &self.labels {
            None => Vec::new(),
            Some(ls) => ls
                .iter()
                .enumerate()
                .filter_map(|(i, &l)| (l == label).then_some(i))
                .collect(),
        }
    }

    /// Sub-cloud of all points carrying the given label.
    pub fn filter_by_label(&self, label: PartLabel) -> PointCloud {
        self.select(&self.indices_with_label(label))
    }

    /// Replaces the frame tag without touching geometry.
    pub fn retagged(mut self, frame: CoordinateFrame) -> PointCloud {
        self.frame = frame;
        self
    }
}

fn orthonormality_drift(r: &Matrix3<f64>) -> f64 {
    let gram = r.transpose() * r;
    let mut drift: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let expected = if i == j { 1.0 } else { 0.0 };
            drift = drift.max((gram[(i, j)] - expected).abs());
        }
    }
    drift
}

/// Nearest rotation matrix in the Frobenius sense (polar decomposition).
fn polar_orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("3x3 SVD with u requested");
    let v_t = svd.v_t.expect("3x3 SVD with v_t requested");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        // Flip the singular direction with the smallest singular value.
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        r = u2 * v_t;
    }
    r
}

/// An SE(3) element: proper rotation plus translation, in millimetres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Validates the rotation part against the SE(3) invariants.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3) -> Result<Self, GeomError> {
        let drift = orthonormality_drift(&rotation);
        if drift > ROTATION_TOL {
            return Err(GeomError::NotOrthonormal(drift));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(GeomError::NotProperRotation(det));
        }
        Ok(RigidTransform {
            rotation,
            translation,
        })
    }

    /// Builds from a possibly drifted rotation, re-orthonormalizing it.
    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3) -> Self {
        let rotation = if orthonormality_drift(&rotation) > REORTHO_DRIFT {
            polar_orthonormalize(&rotation)
        } else {
            rotation
        };
        RigidTransform {
            rotation,
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3 {
        &self.translation
    }

    pub fn apply_point(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn apply_vector(&self, v: &Vector3) -> Vector3 {
        self.rotation * v
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let rotation = self.rotation * other.rotation;
        let translation = self.rotation * other.translation + self.translation;
        RigidTransform::from_parts(rotation, translation)
    }

    pub fn inverse(&self) -> RigidTransform {
        let rotation = self.rotation.transpose();
        let translation = -(rotation * self.translation);
        RigidTransform {
            rotation,
            translation,
        }
    }

    pub fn to_matrix4(&self) -> nalgebra::Matrix4<f64> {
        let mut m = nalgebra::Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Rotation angle (radians) of `self⁻¹ ∘ other`; 0 when equal.
    pub fn rotation_angle_to(&self, other: &RigidTransform) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        let cos = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        cos.acos()
    }

    pub fn translation_distance_to(&self, other: &RigidTransform) -> f64 {
        (self.translation - other.translation).norm()
    }
}

/// Rodrigues' formula: rotation matrix for a rotation vector.
pub fn so3_exp(omega: &Vector3) -> Matrix3<f64> {
    let theta = omega.norm();
    let skew = Matrix3::new(
        0.0, -omega.z, omega.y, omega.z, 0.0, -omega.x, -omega.y, omega.x, 0.0,
    );
    if theta < 1e-12 {
        return Matrix3::identity() + skew;
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    Matrix3::identity() + skew * a + skew * skew * b
}

/// Which end face of the motor a bolt sits on; decides the sign of its axis
/// relative to the motor z-axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BoltSide {
    Top,
    Bottom,
}

impl BoltSide {
    pub fn name(self) -> &'static str {
        match self {
            BoltSide::Top => "top",
            BoltSide::Bottom => "bottom",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "top" => Some(BoltSide::Top),
            "bottom" => Some(BoltSide::Bottom),
            _ => None,
        }
    }
}

/// A position plus a unit axis direction in a tagged coordinate frame.
///
/// Bolt orientation is a single axis: the only orientation information the
/// unscrewing task needs is the motor z-axis direction with a sign.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose6D {
    position: Point3,
    direction: Vector3,
    frame: CoordinateFrame,
}

impl Pose6D {
    pub fn new(
        position: Point3,
        direction: Vector3,
        frame: CoordinateFrame,
    ) -> Result<Self, GeomError> {
        let norm = direction.norm();
        if norm < 1e-12 {
            return Err(GeomError::ZeroDirection);
        }
        Ok(Pose6D {
            position,
            direction: direction / norm,
            frame,
        })
    }

    pub fn position(&self) -> Point3 {
        self.position
    }

    pub fn direction(&self) -> Vector3 {
        self.direction
    }

    pub fn frame(&self) -> CoordinateFrame {
        self.frame
    }
}

/// A rigid transform annotated with source and target frames; the pipeline's
/// model-to-camera and camera-to-robot maps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FramedTransform {
    transform: RigidTransform,
    source: CoordinateFrame,
    target: CoordinateFrame,
}

impl FramedTransform {
    pub fn new(
        transform: RigidTransform,
        source: CoordinateFrame,
        target: CoordinateFrame,
    ) -> Self {
        FramedTransform {
            transform,
            source,
            target,
        }
    }

    pub fn transform(&self) -> &RigidTransform {
        &self.transform
    }

    pub fn source(&self) -> CoordinateFrame {
        self.source
    }

    pub fn target(&self) -> CoordinateFrame {
        self.target
    }

    /// Transports a pose across frames: position affinely, direction by
    /// rotation only.
    pub fn apply_pose(&self, pose: &Pose6D) -> Result<Pose6D, GeomError> {
        if pose.frame != self.source {
            return Err(GeomError::FrameMismatch {
                pose: pose.frame,
                expected: self.source,
            });
        }
        let position = self.transform.apply_point(&pose.position);
        let direction = self.transform.apply_vector(&pose.direction);
        Pose6D::new(position, direction, self.target)
    }

    pub fn apply_cloud(&self, cloud: &PointCloud) -> Result<PointCloud, GeomError> {
        if cloud.frame() != self.source {
            return Err(GeomError::FrameMismatch {
                pose: cloud.frame(),
                expected: self.source,
            });
        }
        Ok(cloud.transformed(&self.transform).retagged(self.target))
    }

    /// `self ∘ other`: `other` maps X→Y, `self` maps Y→Z.
    pub fn compose(&self, other: &FramedTransform) -> Result<FramedTransform, GeomError> {
        if self.source != other.target {
            return Err(GeomError::FrameChainMismatch {
                lhs: self.source,
                rhs: other.target,
            });
        }
        Ok(FramedTransform {
            transform: self.transform.compose(&other.transform),
            source: other.source,
            target: self.target,
        })
    }

    pub fn inverse(&self) -> FramedTransform {
        FramedTransform {
            transform: self.transform.inverse(),
            source: self.target,
            target: self.source,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rot_z(deg: f64) -> Matrix3<f64> {
        let (s, c) = deg.to_radians().sin_cos();
        Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
    }

    #[test]
    fn compose_identity_is_noop() {
        let t = RigidTransform::new(rot_z(37.0), Vector3::new(1.0, -2.0, 3.0)).unwrap();
        let composed = RigidTransform::identity().compose(&t);
        assert_abs_diff_eq!(composed.rotation(), t.rotation(), epsilon = 1e-15);
        assert_abs_diff_eq!(composed.translation(), t.translation(), epsilon = 1e-15);
    }

    #[test]
    fn compose_inverse_rotations_cancel() {
        let a = RigidTransform::new(rot_z(90.0), Vector3::zeros()).unwrap();
        let b = RigidTransform::new(rot_z(-90.0), Vector3::zeros()).unwrap();
        let c = a.compose(&b);
        assert_abs_diff_eq!(c.rotation(), &Matrix3::identity(), epsilon = 1e-12);
        assert_abs_diff_eq!(c.translation().norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn compose_matches_sequential_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = reference::random_rigid_transform(&mut rng, 50.0);
        let b = reference::random_rigid_transform(&mut rng, 50.0);
        let ab = a.compose(&b);
        for _ in 0..100 {
            let p = reference::random_point(&mut rng, 100.0);
            let direct = ab.apply_point(&p);
            let sequential = a.apply_point(&b.apply_point(&p));
            assert_abs_diff_eq!(direct, sequential, epsilon = 1e-9);
        }
    }

    #[test]
    fn inverse_composes_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let t = reference::random_rigid_transform(&mut rng, 200.0);
            let id = t.inverse().compose(&t);
            assert_abs_diff_eq!(id.rotation(), &Matrix3::identity(), epsilon = 1e-9);
            assert_abs_diff_eq!(id.translation().norm(), 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn long_composition_chain_stays_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut acc = RigidTransform::identity();
        for _ in 0..1000 {
            acc = acc.compose(&reference::random_rigid_transform(&mut rng, 10.0));
        }
        assert!(orthonormality_drift(acc.rotation()) < 1e-9);
        assert!((acc.rotation().determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn apply_pose_identity_and_translation() {
        let pose = Pose6D::new(
            Point3::new(1.0, 2.0, 3.0),
            Vector3::new(0.0, 0.0, 1.0),
            CoordinateFrame::Camera,
        )
        .unwrap();
        let id = FramedTransform::new(
            RigidTransform::identity(),
            CoordinateFrame::Camera,
            CoordinateFrame::Camera,
        );
        let out = id.apply_pose(&pose).unwrap();
        assert_eq!(out, pose);

        let shift = FramedTransform::new(
            RigidTransform::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 10.0)).unwrap(),
            CoordinateFrame::Camera,
            CoordinateFrame::Robot,
        );
        let out = shift.apply_pose(&pose).unwrap();
        assert_abs_diff_eq!(out.position(), Point3::new(1.0, 2.0, 13.0), epsilon = 1e-15);
        assert_abs_diff_eq!(out.direction(), pose.direction(), epsilon = 1e-15);
        assert_eq!(out.frame(), CoordinateFrame::Robot);
    }

    #[test]
    fn apply_pose_matches_homogeneous_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let t = reference::random_rigid_transform(&mut rng, 100.0);
            let pose = Pose6D::new(
                reference::random_point(&mut rng, 100.0),
                reference::random_unit_vector(&mut rng),
                CoordinateFrame::FullModel,
            )
            .unwrap();
            let framed =
                FramedTransform::new(t, CoordinateFrame::FullModel, CoordinateFrame::Camera);
            let got = framed.apply_pose(&pose).unwrap();
            let (want_pos, want_dir) = reference::pose_transport_homogeneous(&t, &pose);
            assert_abs_diff_eq!(got.position(), want_pos, epsilon = 1e-9);
            assert_abs_diff_eq!(got.direction(), want_dir, epsilon = 1e-9);
        }
    }

    #[test]
    fn apply_pose_rejects_wrong_frame() {
        let pose = Pose6D::new(
            Point3::origin(),
            Vector3::z(),
            CoordinateFrame::Robot,
        )
        .unwrap();
        let t = FramedTransform::new(
            RigidTransform::identity(),
            CoordinateFrame::Camera,
            CoordinateFrame::Robot,
        );
        assert!(matches!(
            t.apply_pose(&pose),
            Err(GeomError::FrameMismatch { .. })
        ));
    }

    #[test]
    fn apply_pose_preserves_angles() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..50 {
            let t = reference::random_rigid_transform(&mut rng, 100.0);
            let u = reference::random_unit_vector(&mut rng);
            let v = reference::random_unit_vector(&mut rng);
            let before = u.dot(&v).clamp(-1.0, 1.0).acos();
            let after = t
                .apply_vector(&u)
                .dot(&t.apply_vector(&v))
                .clamp(-1.0, 1.0)
                .acos();
            assert!((before - after).abs() < 1e-9);
        }
    }

    #[test]
    fn cloud_invariants_enforced() {
        assert!(matches!(
            PointCloud::new(
                vec![Point3::new(f64::NAN, 0.0, 0.0)],
                CoordinateFrame::Camera
            ),
            Err(GeomError::NonFinite(0))
        ));
        let cloud = PointCloud::new(vec![Point3::origin()], CoordinateFrame::Camera).unwrap();
        assert!(matches!(
            cloud.clone().with_normals(vec![Vector3::new(0.5, 0.0, 0.0)]),
            Err(GeomError::NotUnitNormal(0))
        ));
        assert!(matches!(
            cloud.with_normals(vec![]),
            Err(GeomError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn framed_compose_checks_chain() {
        let cb = FramedTransform::new(
            RigidTransform::identity(),
            CoordinateFrame::FullModel,
            CoordinateFrame::Camera,
        );
        let ba = FramedTransform::new(
            RigidTransform::identity(),
            CoordinateFrame::Camera,
            CoordinateFrame::Robot,
        );
        let ca = ba.compose(&cb).unwrap();
        assert_eq!(ca.source(), CoordinateFrame::FullModel);
        assert_eq!(ca.target(), CoordinateFrame::Robot);
        assert!(ba.compose(&ba).is_err());
    }
}
