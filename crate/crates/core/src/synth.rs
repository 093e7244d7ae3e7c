//! Deterministic synthetic motor scenes with ground truth.
//!
//! Stands in for the scanners and learned segmentation of a real cell:
//! generates labeled full-motor clouds from analytic primitives, renders
//! clamped single-view scans with self- and clamp-occlusion, and records the
//! ground truth (pose, bolt centers and sides) every accuracy test needs.
//!
//! Canonical pose: housing axis = z, connector toward +z, solenoid offset
//! toward +y. Bolt centers use the visible-head-centroid convention (the
//! centroid of the sampled, noise-free head points), matching the clustering
//! stage's centroid rule so accuracy numbers compare like with like.

use std::collections::HashMap;
use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::alignment::MotorFrame;
use crate::geometry::{
    BoltSide, CoordinateFrame, PartLabel, Point3, PointCloud, RigidTransform, Vector3,
};
use crate::index::SpatialIndex;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid motor spec: {0}")]
    InvalidSpec(String),
    #[error("camera lies inside the scene's bounding sphere")]
    CameraInsideGeometry,
}

/// Dimensions and sampling parameters of a synthetic motor. Millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct MotorSpec {
    pub housing_radius_mm: f64,
    pub housing_length_mm: f64,
    pub solenoid_radius_mm: f64,
    pub solenoid_length_mm: f64,
    /// Distance from the housing axis to the solenoid axis, along +y.
    pub solenoid_offset_mm: f64,
    /// Connector box (x extent, y extent, height above the top cap).
    pub connector_size_mm: [f64; 3],
    pub bolts_top: usize,
    pub bolts_bottom: usize,
    pub bolt_head_radius_mm: f64,
    pub bolt_head_height_mm: f64,
    /// Radius of the circle the bolt centers sit on.
    pub bolt_placement_radius_mm: f64,
    pub density_pts_per_mm2: f64,
    pub noise_sigma_mm: f64,
    /// Fraction of near-boundary points whose part label is flipped to a
    /// neighboring part, emulating imperfect segmentation. 0 disables.
    pub label_noise_fraction: f64,
    pub seed: u64,
}

impl Default for MotorSpec {
    fn default() -> Self {
        MotorSpec {
            housing_radius_mm: 30.0,
            housing_length_mm: 100.0,
            solenoid_radius_mm: 14.0,
            solenoid_length_mm: 80.0,
            solenoid_offset_mm: 46.0,
            connector_size_mm: [20.0, 20.0, 24.0],
            bolts_top: 6,
            bolts_bottom: 3,
            bolt_head_radius_mm: 4.0,
            bolt_head_height_mm: 4.0,
            bolt_placement_radius_mm: 21.0,
            density_pts_per_mm2: 2.0,
            noise_sigma_mm: 0.1,
            label_noise_fraction: 0.0,
            seed: 0,
        }
    }
}

impl MotorSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let err = |msg: String| Err(SynthError::InvalidSpec(msg));
        for (name, v) in [
            ("housing_radius_mm", self.housing_radius_mm),
            ("housing_length_mm", self.housing_length_mm),
            ("solenoid_radius_mm", self.solenoid_radius_mm),
            ("solenoid_length_mm", self.solenoid_length_mm),
            ("bolt_head_radius_mm", self.bolt_head_radius_mm),
            ("bolt_head_height_mm", self.bolt_head_height_mm),
            ("bolt_placement_radius_mm", self.bolt_placement_radius_mm),
            ("density_pts_per_mm2", self.density_pts_per_mm2),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return err(format!("{name} must be positive, got {v}"));
            }
        }
        if self.connector_size_mm.iter().any(|&v| !(v > 0.0)) {
            return err("connector dimensions must be positive".into());
        }
        if !(self.noise_sigma_mm >= 0.0) {
            return err("noise_sigma_mm must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.label_noise_fraction) {
            return err("label_noise_fraction must be in [0, 1)".into());
        }
        if self.solenoid_offset_mm < self.housing_radius_mm + self.solenoid_radius_mm - 1e-9 {
            return err("solenoid overlaps the housing".into());
        }
        // Bolt placement: inside the cap, clear of the connector footprint,
        // and mutually non-overlapping.
        let rp = self.bolt_placement_radius_mm;
        let rb = self.bolt_head_radius_mm;
        if rp + rb >= self.housing_radius_mm {
            return err("bolt circle extends beyond the cap".into());
        }
        let conn_half_diag =
            0.5 * (self.connector_size_mm[0].powi(2) + self.connector_size_mm[1].powi(2)).sqrt();
        if self.bolts_top > 0 && rp - rb <= conn_half_diag {
            return err("top bolts collide with the connector footprint".into());
        }
        for count in [self.bolts_top, self.bolts_bottom] {
            if count >= 2 {
                let chord = 2.0 * rp * (std::f64::consts::PI / count as f64).sin();
                if chord <= 2.0 * rb {
                    return err(format!("{count} bolts overlap on the placement circle"));
                }
            }
        }
        Ok(())
    }

    pub fn total_bolts(&self) -> usize {
        self.bolts_top + self.bolts_bottom
    }
}

/// Everything the accuracy tests compare against.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Transform placing the motor in the camera frame; identity for a
    /// freshly generated full model.
    pub true_pose: RigidTransform,
    /// Per-bolt head centroids in the model frame (noise-free convention).
    pub bolt_centers: Vec<Point3>,
    pub bolt_sides: Vec<BoltSide>,
    /// Canonical axes reference; identity triad by construction.
    pub canonical_frame: MotorFrame,
}

impl GroundTruth {
    pub fn with_pose(mut self, pose: RigidTransform) -> Self {
        self.true_pose = pose;
        self
    }
}

/// Regular-hexagon helpers (circumradius r, vertices at multiples of 60°).
fn hexagon_area(r: f64) -> f64 {
    1.5 * 3f64.sqrt() * r * r
}

fn point_in_hexagon(x: f64, y: f64, cx: f64, cy: f64, r: f64) -> bool {
    let apothem = r * 3f64.sqrt() / 2.0;
    let (dx, dy) = (x - cx, y - cy);
    for k in 0..6 {
        let a = (k as f64 * 60.0 + 30.0).to_radians();
        if dx * a.cos() + dy * a.sin() > apothem {
            return false;
        }
    }
    true
}

struct Sampler<'a> {
    rng: &'a mut ChaCha8Rng,
    density: f64,
    points: Vec<Point3>,
    normals: Vec<Vector3>,
    labels: Vec<PartLabel>,
}

impl<'a> Sampler<'a> {
    fn count(&self, area: f64) -> usize {
        (area * self.density).round() as usize
    }

    fn push(&mut self, p: Point3, n: Vector3, label: PartLabel) {
        self.points.push(p);
        self.normals.push(n);
        self.labels.push(label);
    }

    /// Open cylinder side, axis parallel z at (cx, cy).
    fn cylinder_side(&mut self, cx: f64, cy: f64, r: f64, z0: f64, z1: f64, label: PartLabel) {
        let n = self.count(TAU * r * (z1 - z0));
        for _ in 0..n {
            let theta = self.rng.random_range(0.0..TAU);
            let z = self.rng.random_range(z0..z1);
            self.push(
                Point3::new(cx + r * theta.cos(), cy + r * theta.sin(), z),
                Vector3::new(theta.cos(), theta.sin(), 0.0),
                label,
            );
        }
    }

    /// Disk at height z, rejecting candidates for which `reject` is true.
    fn disk(
        &mut self,
        cx: f64,
        cy: f64,
        r: f64,
        z: f64,
        normal_z: f64,
        label: PartLabel,
        reject: impl Fn(f64, f64) -> bool,
    ) {
        let n = self.count(std::f64::consts::PI * r * r);
        for _ in 0..n {
            let rad = r * self.rng.random_range(0.0f64..1.0).sqrt();
            let theta = self.rng.random_range(0.0..TAU);
            let (x, y) = (cx + rad * theta.cos(), cy + rad * theta.sin());
            if reject(x, y) {
                continue;
            }
            self.push(
                Point3::new(x, y, z),
                Vector3::new(0.0, 0.0, normal_z),
                label,
            );
        }
    }

    /// Axis-aligned rectangle spanned by (origin, u, v) with a fixed normal.
    fn rect(&mut self, origin: Point3, u: Vector3, v: Vector3, normal: Vector3, label: PartLabel) {
        let n = self.count(u.norm() * v.norm());
        for _ in 0..n {
            let a: f64 = self.rng.random_range(0.0..1.0);
            let b: f64 = self.rng.random_range(0.0..1.0);
            self.push(origin + u * a + v * b, normal, label);
        }
    }

    /// Hexagonal top/bottom face via bounding-box rejection sampling.
    fn hex_face(&mut self, cx: f64, cy: f64, r: f64, z: f64, normal_z: f64, label: PartLabel) {
        let n = self.count(4.0 * r * r);
        for _ in 0..n {
            let x = cx + self.rng.random_range(-r..r);
            let y = cy + self.rng.random_range(-r..r);
            if point_in_hexagon(x, y, cx, cy, r) {
                self.push(
                    Point3::new(x, y, z),
                    Vector3::new(0.0, 0.0, normal_z),
                    label,
                );
            }
        }
    }

    /// Six rectangular side faces of a hex prism.
    fn hex_sides(&mut self, cx: f64, cy: f64, r: f64, z0: f64, z1: f64, label: PartLabel) {
        for k in 0..6 {
            let a0 = (k as f64 * 60.0).to_radians();
            let a1 = ((k + 1) as f64 * 60.0).to_radians();
            let v0 = Point3::new(cx + r * a0.cos(), cy + r * a0.sin(), z0);
            let v1 = Point3::new(cx + r * a1.cos(), cy + r * a1.sin(), z0);
            let mid = (k as f64 * 60.0 + 30.0).to_radians();
            let normal = Vector3::new(mid.cos(), mid.sin(), 0.0);
            self.rect(v0, v1 - v0, Vector3::new(0.0, 0.0, z1 - z0), normal, label);
        }
    }
}

fn bolt_positions(count: usize, radius: f64) -> Vec<(f64, f64)> {
    (0..count)
        .map(|i| {
            let phi = TAU * i as f64 / count as f64;
            (radius * phi.cos(), radius * phi.sin())
        })
        .collect()
}

/// Flips a fraction of near-boundary labels to the label of their nearest
/// differently-labeled neighbor.
fn flip_labels_near_boundaries(
    points: &[Point3],
    labels: &mut [PartLabel],
    fraction: f64,
    boundary_radius: f64,
    rng: &mut ChaCha8Rng,
) {
    if fraction <= 0.0 || points.is_empty() {
        return;
    }
    let index = SpatialIndex::from_points(points.to_vec()).expect("non-empty");
    let mut flips: Vec<(usize, PartLabel)> = Vec::new();
    for (i, p) in points.iter().enumerate() {
        if rng.random_range(0.0..1.0) >= fraction {
            continue;
        }
        let other = index
            .radius(p, boundary_radius)
            .into_iter()
            .find(|&(j, _)| labels[j] != labels[i]);
        if let Some((j, _)) = other {
            flips.push((i, labels[j]));
        }
    }
    for (i, l) in flips {
        labels[i] = l;
    }
}

/// Samples a labeled full-motor cloud in canonical pose and records ground
/// truth. Deterministic per spec (the seed drives all sampling).
pub fn generate_full_motor(spec: &MotorSpec) -> Result<(PointCloud, GroundTruth), SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut s = Sampler {
        rng: &mut rng,
        density: spec.density_pts_per_mm2,
        points: Vec::new(),
        normals: Vec::new(),
        labels: Vec::new(),
    };

    let r = spec.housing_radius_mm;
    let half_len = spec.housing_length_mm / 2.0;
    let [cw, cd, ch] = spec.connector_size_mm;
    let rb = spec.bolt_head_radius_mm;
    let bh = spec.bolt_head_height_mm;
    let top_bolts = bolt_positions(spec.bolts_top, spec.bolt_placement_radius_mm);
    let bottom_bolts = bolt_positions(spec.bolts_bottom, spec.bolt_placement_radius_mm);

    // Housing: side plus caps with connector and bolt footprints cut out.
    s.cylinder_side(0.0, 0.0, r, -half_len, half_len, PartLabel::MainHousing);
    {
        let top_bolts = top_bolts.clone();
        s.disk(0.0, 0.0, r, half_len, 1.0, PartLabel::MainHousing, |x, y| {
            (x.abs() <= cw / 2.0 && y.abs() <= cd / 2.0)
                || top_bolts
                    .iter()
                    .any(|&(bx, by)| point_in_hexagon(x, y, bx, by, rb))
        });
    }
    {
        let bottom_bolts = bottom_bolts.clone();
        s.disk(0.0, 0.0, r, -half_len, -1.0, PartLabel::MainHousing, |x, y| {
            bottom_bolts
                .iter()
                .any(|&(bx, by)| point_in_hexagon(x, y, bx, by, rb))
        });
    }

    // Connector box on the top cap: top face and four sides.
    let conn_origin = Point3::new(-cw / 2.0, -cd / 2.0, half_len);
    s.rect(
        Point3::new(-cw / 2.0, -cd / 2.0, half_len + ch),
        Vector3::new(cw, 0.0, 0.0),
        Vector3::new(0.0, cd, 0.0),
        Vector3::z(),
        PartLabel::Connector,
    );
    let up = Vector3::new(0.0, 0.0, ch);
    s.rect(
        conn_origin,
        Vector3::new(cw, 0.0, 0.0),
        up,
        -Vector3::y(),
        PartLabel::Connector,
    );
    s.rect(
        Point3::new(-cw / 2.0, cd / 2.0, half_len),
        Vector3::new(cw, 0.0, 0.0),
        up,
        Vector3::y(),
        PartLabel::Connector,
    );
    s.rect(
        conn_origin,
        Vector3::new(0.0, cd, 0.0),
        up,
        -Vector3::x(),
        PartLabel::Connector,
    );
    s.rect(
        Point3::new(cw / 2.0, -cd / 2.0, half_len),
        Vector3::new(0.0, cd, 0.0),
        up,
        Vector3::x(),
        PartLabel::Connector,
    );

    // Solenoid alongside the housing toward +y.
    let sl_half = spec.solenoid_length_mm / 2.0;
    s.cylinder_side(
        0.0,
        spec.solenoid_offset_mm,
        spec.solenoid_radius_mm,
        -sl_half,
        sl_half,
        PartLabel::Solenoid,
    );
    s.disk(
        0.0,
        spec.solenoid_offset_mm,
        spec.solenoid_radius_mm,
        sl_half,
        1.0,
        PartLabel::Solenoid,
        |_, _| false,
    );
    s.disk(
        0.0,
        spec.solenoid_offset_mm,
        spec.solenoid_radius_mm,
        -sl_half,
        -1.0,
        PartLabel::Solenoid,
        |_, _| false,
    );

    // Bolt heads; track the sampled centroid of each as its ground truth.
    let mut bolt_centers = Vec::new();
    let mut bolt_sides = Vec::new();
    for &(bx, by) in &top_bolts {
        let start = s.points.len();
        s.hex_sides(bx, by, rb, half_len, half_len + bh, PartLabel::Bolt);
        s.hex_face(bx, by, rb, half_len + bh, 1.0, PartLabel::Bolt);
        bolt_centers.push(centroid_of(&s.points[start..]));
        bolt_sides.push(BoltSide::Top);
    }
    for &(bx, by) in &bottom_bolts {
        let start = s.points.len();
        s.hex_sides(bx, by, rb, -half_len - bh, -half_len, PartLabel::Bolt);
        s.hex_face(bx, by, rb, -half_len - bh, -1.0, PartLabel::Bolt);
        bolt_centers.push(centroid_of(&s.points[start..]));
        bolt_sides.push(BoltSide::Bottom);
    }

    let Sampler {
        points: mut pts,
        normals,
        mut labels,
        ..
    } = s;

    if spec.label_noise_fraction > 0.0 {
        let boundary = 2.0 / spec.density_pts_per_mm2.sqrt();
        flip_labels_near_boundaries(
            &pts,
            &mut labels,
            spec.label_noise_fraction,
            boundary,
            &mut rng,
        );
    }

    if spec.noise_sigma_mm > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma_mm).expect("sigma >= 0");
        for p in pts.iter_mut() {
            p.x += normal.sample(&mut rng);
            p.y += normal.sample(&mut rng);
            p.z += normal.sample(&mut rng);
        }
    }

    let cloud = PointCloud::new(pts, CoordinateFrame::FullModel)
        .expect("finite samples")
        .with_normals(normals)
        .expect("unit analytic normals")
        .with_labels(labels)
        .expect("parallel labels");
    let truth = GroundTruth {
        true_pose: RigidTransform::identity(),
        bolt_centers,
        bolt_sides,
        canonical_frame: MotorFrame::identity(),
    };
    Ok((cloud, truth))
}

fn centroid_of(points: &[Point3]) -> Point3 {
    let sum = points
        .iter()
        .fold(Vector3::zeros(), |acc, p| acc + p.coords);
    Point3::from(sum / points.len().max(1) as f64)
}

/// Single-view rendering controls.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderParams {
    pub camera: Point3,
    pub clamp: bool,
    /// Angular z-buffer cell size in degrees.
    pub cell_deg: f64,
    /// Seed for clamp sampling and label-noise draws.
    pub seed: u64,
    /// Fraction of near-boundary binary labels flipped (motor vs clamp).
    pub label_noise_fraction: f64,
}

impl Default for RenderParams {
    fn default() -> Self {
        RenderParams {
            camera: Point3::new(0.0, -180.0, 260.0),
            clamp: true,
            cell_deg: 0.2,
            seed: 0,
            label_noise_fraction: 0.0,
        }
    }
}

/// The full model→camera transform of a rendered scene: the placing pose
/// followed by the shift that puts the camera at the origin of frame B.
pub fn scene_transform(pose: &RigidTransform, camera: &Point3) -> RigidTransform {
    let to_camera = RigidTransform::from_parts(nalgebra::Matrix3::identity(), -camera.coords);
    to_camera.compose(pose)
}

/// Renders the posed motor (plus optional clamp jaws) as seen from a fixed
/// camera: back-facing points are dropped, then a deterministic angular
/// z-buffer keeps the nearest point per 0.2° direction cell. Culling only;
/// no point is synthesized. Part labels collapse to the binary scene labels.
///
/// The scene is expressed in the camera frame (camera at the origin); the
/// returned transform maps model coordinates into that frame and is the
/// ground-truth pose the registration stage must recover.
pub fn render_single_view(
    full: &PointCloud,
    spec: &MotorSpec,
    pose: &RigidTransform,
    params: &RenderParams,
) -> Result<(PointCloud, RigidTransform), SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    let posed = full.transformed(pose);
    let mut points: Vec<Point3> = posed.points().to_vec();
    let mut normals: Vec<Vector3> = posed
        .normals()
        .map(|n| n.to_vec())
        .unwrap_or_else(|| vec![Vector3::z(); points.len()]);
    let mut labels: Vec<PartLabel> = vec![PartLabel::MotorForeground; points.len()];

    if params.clamp {
        let mut s = Sampler {
            rng: &mut rng,
            density: spec.density_pts_per_mm2,
            points: Vec::new(),
            normals: Vec::new(),
            labels: Vec::new(),
        };
        let r = spec.housing_radius_mm;
        let jaw_t = 0.5 * r;
        let jaw_w = 1.4 * r;
        let jaw_h = 0.4 * spec.housing_length_mm;
        for sign in [1.0f64, -1.0] {
            let x0 = sign * (0.98 * r);
            let x1 = sign * (0.98 * r + jaw_t);
            let (near, far) = (x0.min(x1), x0.max(x1));
            let origin = Point3::new(near, -jaw_w / 2.0, -jaw_h / 2.0);
            let ux = Vector3::new(far - near, 0.0, 0.0);
            let uy = Vector3::new(0.0, jaw_w, 0.0);
            let uz = Vector3::new(0.0, 0.0, jaw_h);
            // Six faces of the jaw box.
            s.rect(origin, uy, uz, -Vector3::x(), PartLabel::Clamp);
            s.rect(origin + ux, uy, uz, Vector3::x(), PartLabel::Clamp);
            s.rect(origin, ux, uz, -Vector3::y(), PartLabel::Clamp);
            s.rect(origin + uy, ux, uz, Vector3::y(), PartLabel::Clamp);
            s.rect(origin, ux, uy, -Vector3::z(), PartLabel::Clamp);
            s.rect(origin + uz, ux, uy, Vector3::z(), PartLabel::Clamp);
        }
        let Sampler {
            points: mut jaw_points,
            normals: jaw_normals,
            ..
        } = s;
        if spec.noise_sigma_mm > 0.0 {
            let normal = Normal::new(0.0, spec.noise_sigma_mm).expect("sigma >= 0");
            for p in jaw_points.iter_mut() {
                p.x += normal.sample(&mut rng);
                p.y += normal.sample(&mut rng);
                p.z += normal.sample(&mut rng);
            }
        }
        for (p, n) in jaw_points.iter().zip(&jaw_normals) {
            points.push(pose.apply_point(p));
            normals.push(pose.apply_vector(n));
            labels.push(PartLabel::Clamp);
        }
    }

    // Camera must stay outside the scene's bounding sphere.
    let center = centroid_of(&points);
    let bound = points
        .iter()
        .map(|p| (p - center).norm())
        .fold(0.0f64, f64::max);
    if (params.camera - center).norm() <= bound {
        return Err(SynthError::CameraInsideGeometry);
    }

    // Back-face cull, then keep the nearest point per angular cell.
    let cell = params.cell_deg.to_radians();
    let mut buffer: HashMap<(i64, i64), (f64, usize)> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        let d = p - params.camera;
        let dist = d.norm();
        if normals[i].dot(&d) > 0.0 {
            continue;
        }
        let az = d.y.atan2(d.x);
        let el = (d.z / dist).clamp(-1.0, 1.0).asin();
        let key = ((az / cell).floor() as i64, (el / cell).floor() as i64);
        let entry = buffer.entry(key).or_insert((f64::INFINITY, usize::MAX));
        if (dist, i) < *entry {
            *entry = (dist, i);
        }
    }
    let mut keep: Vec<usize> = buffer.values().map(|&(_, i)| i).collect();
    keep.sort_unstable();

    // Shift into the camera frame: camera at the origin.
    let out_points: Vec<Point3> = keep
        .iter()
        .map(|&i| Point3::from(points[i] - params.camera))
        .collect();
    let out_normals: Vec<Vector3> = keep.iter().map(|&i| normals[i]).collect();
    let mut out_labels: Vec<PartLabel> = keep.iter().map(|&i| labels[i]).collect();

    if params.label_noise_fraction > 0.0 {
        let boundary = 2.0 / spec.density_pts_per_mm2.sqrt();
        flip_labels_near_boundaries(
            &out_points,
            &mut out_labels,
            params.label_noise_fraction,
            boundary,
            &mut rng,
        );
    }

    let cloud = PointCloud::new(out_points, CoordinateFrame::Camera)
        .expect("finite")
        .with_normals(out_normals)
        .expect("unit normals")
        .with_labels(out_labels)
        .expect("parallel labels");
    Ok((cloud, scene_transform(pose, &params.camera)))
}
