//! End-to-end orchestration: segment, register, cluster, align, transport.
//!
//! The full model is registered onto the scene's motor points (coarse FGR
//! then the multi-step ICP schedule), bolts are clustered on the full model
//! so occluded bolts are still reported, the motor triad comes from normal
//! alignment, and every bolt pose is emitted in the model, camera and robot
//! frames.

use thiserror::Error;

use crate::alignment::{
    build_motor_frame, normal_sphere, ransac_equator, AlignError, MotorFrame, RansacPlaneParams,
};
use crate::cluster::{dbscan, BoltCluster, ClusterError, DbscanParams};
use crate::coarse::{fgr_align, match_features, CoarseError, FgrParams};
use crate::fine::{icp_multistep, FineError, IcpSchedule, IcpVariant, RegistrationReport};
use crate::fpfh::compute_fpfh;
use crate::geometry::{
    BoltSide, CoordinateFrame, FramedTransform, PartLabel, Point3, PointCloud, Pose6D,
    RigidTransform, Vector3,
};
use crate::index::SpatialIndex;
use crate::normals::{estimate_normals, NormalEstimationParams, NormalOrientation};
use crate::voxel::voxel_downsample;

/// A bolt is flagged invisible when fewer scene points than this fall within
/// 2·eps of its transformed centroid.
pub const VISIBLE_MIN_POINTS: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistrationStageError {
    #[error(transparent)]
    Coarse(#[from] CoarseError),
    #[error(transparent)]
    Fine(#[from] FineError),
    #[error("preprocessing: {0}")]
    Preprocess(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("input: {0}")]
    Input(String),
    #[error("registration stage: {0}")]
    Registration(#[from] RegistrationStageError),
    #[error("registration failed: final RMSE {rmse_mm:.4} mm exceeds gate {gate_mm} mm")]
    RegistrationFailed { rmse_mm: f64, gate_mm: f64 },
    #[error("clustering stage: {0}")]
    Clustering(#[from] ClusterError),
    #[error("alignment stage: {0}")]
    Alignment(#[from] AlignError),
    #[error("side classification: bolt cluster normal and position are both \
             perpendicular to the motor axis")]
    UnresolvableSide,
}

/// Registration-related knobs of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationConfig {
    /// Voxel size for the coarse-stage downsample.
    pub voxel_mm: f64,
    /// Optional voxel size for the fine-stage source; None keeps full
    /// resolution.
    pub icp_voxel_mm: Option<f64>,
    pub normal_k: usize,
    /// FPFH radius; defaults to 5× the coarse voxel when unset.
    pub fpfh_radius_mm: Option<f64>,
    pub fgr: FgrParams,
    pub schedule: IcpSchedule,
    pub variant: IcpVariant,
    /// Final-RMSE gate; results above it are refused rather than emitted.
    pub rmse_gate_mm: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            voxel_mm: 5.0,
            icp_voxel_mm: Some(1.0),
            normal_k: 20,
            fpfh_radius_mm: None,
            fgr: FgrParams::default(),
            schedule: IcpSchedule::standard(),
            variant: IcpVariant::PointToPlane,
            rmse_gate_mm: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub registration: RegistrationConfig,
    pub dbscan: DbscanParams,
    pub ransac: RansacPlaneParams,
    /// Extrinsic hand-eye calibration (camera → robot base).
    pub camera_to_robot: RigidTransform,
    /// Master seed; stage seeds are derived from it.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            registration: RegistrationConfig::default(),
            dbscan: DbscanParams::default(),
            ransac: RansacPlaneParams::default(),
            camera_to_robot: RigidTransform::identity(),
            seed: 0,
        }
    }
}

/// splitmix64 step for deriving stage seeds from the master seed.
pub(crate) fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One bolt with its pose in all three frames.
#[derive(Debug, Clone, PartialEq)]
pub struct BoltResult {
    pub id: usize,
    pub pose_c: Pose6D,
    pub pose_b: Pose6D,
    pub pose_a: Pose6D,
    pub side: BoltSide,
    pub cluster_size: usize,
    pub visible_in_scan: bool,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub bolts: Vec<BoltResult>,
    /// Coarse step followed by the fine steps; transform = model→camera.
    pub report: RegistrationReport,
    pub model_to_camera: FramedTransform,
    pub motor_frame: MotorFrame,
}

/// The bolt axis follows the motor z-axis, flipped for bottom-face bolts.
pub fn bolt_axis_from_side(frame: &MotorFrame, side: BoltSide) -> Vector3 {
    match side {
        BoltSide::Top => frame.z_axis,
        BoltSide::Bottom => -frame.z_axis,
    }
}

/// Top iff the cluster's mean normal points along +z; near-perpendicular
/// normals fall back to which end of the motor the centroid sits on.
pub fn classify_bolt_side(
    cluster: &BoltCluster,
    frame: &MotorFrame,
) -> Result<BoltSide, PipelineError> {
    const TIE: f64 = 1e-6;
    if let Some(n) = cluster.mean_normal {
        let dot = n.dot(&frame.z_axis);
        if dot > TIE {
            return Ok(BoltSide::Top);
        }
        if dot < -TIE {
            return Ok(BoltSide::Bottom);
        }
    }
    let positional = (cluster.centroid - frame.origin).dot(&frame.z_axis);
    if positional > TIE {
        Ok(BoltSide::Top)
    } else if positional < -TIE {
        Ok(BoltSide::Bottom)
    } else {
        Err(PipelineError::UnresolvableSide)
    }
}

fn ensure_normals(
    cloud: &PointCloud,
    k: usize,
    orientation: NormalOrientation,
) -> Result<PointCloud, PipelineError> {
    if cloud.normals().is_some() {
        return Ok(cloud.clone());
    }
    estimate_normals(cloud, &NormalEstimationParams::new(k, orientation))
        .map(|e| e.cloud)
        .map_err(|e| RegistrationStageError::Preprocess(e.to_string()).into())
}

/// Flips estimated normals that disagree with the nearest reference-cloud
/// normal. Keeps the downsampled clouds' orientation consistent with the
/// full-resolution input regardless of where the frame origin sits.
fn orient_to_reference(est: &mut crate::normals::EstimatedNormals, reference: &PointCloud) {
    let Some(ref_normals) = reference.normals() else {
        return;
    };
    let index = SpatialIndex::build(reference).expect("non-empty reference");
    let points = est.cloud.points().to_vec();
    let mut normals = est.cloud.normals().expect("just estimated").to_vec();
    for (p, n) in points.iter().zip(normals.iter_mut()) {
        let (j, _) = index.k_nearest(p, 1)[0];
        if n.dot(&ref_normals[j]) < 0.0 {
            *n = -*n;
        }
    }
    est.cloud = PointCloud::new(points, est.cloud.frame())
        .expect("finite")
        .with_normals(normals)
        .expect("unit normals");
}

/// Registers the full model onto the scene motor: voxel downsample, normal
/// estimation, FPFH, FGR, then the ICP schedule on denser clouds.
pub fn register_model_to_scene(
    full_model: &PointCloud,
    scene_motor: &PointCloud,
    config: &RegistrationConfig,
    seed: u64,
) -> Result<(RigidTransform, RegistrationReport), PipelineError> {
    let pre = |e: &dyn std::fmt::Display| -> PipelineError {
        RegistrationStageError::Preprocess(e.to_string()).into()
    };
    let voxel = config.voxel_mm;
    let model_ds = voxel_downsample(full_model, voxel).map_err(|e| pre(&e))?;
    let scene_ds = voxel_downsample(scene_motor, voxel).map_err(|e| pre(&e))?;

    let model_centroid = model_ds.centroid().expect("non-empty");
    let mut model_est = estimate_normals(
        &model_ds,
        &NormalEstimationParams::new(
            config.normal_k,
            NormalOrientation::OutwardFromPoint(model_centroid),
        ),
    )
    .map_err(|e| pre(&e))?;
    orient_to_reference(&mut model_est, full_model);
    // Scene clouds live in the camera frame, so the viewpoint is the origin;
    // provided scene normals override that guess where available.
    let mut scene_est = estimate_normals(
        &scene_ds,
        &NormalEstimationParams::new(
            config.normal_k,
            NormalOrientation::Viewpoint(Point3::origin()),
        ),
    )
    .map_err(|e| pre(&e))?;
    orient_to_reference(&mut scene_est, scene_motor);

    let fpfh_radius = config.fpfh_radius_mm.unwrap_or(5.0 * voxel);
    let mut model_feats = compute_fpfh(&model_est.cloud, fpfh_radius).map_err(|e| pre(&e))?;
    model_feats.merge_flags(&model_est.low_confidence);
    let mut scene_feats = compute_fpfh(&scene_est.cloud, fpfh_radius).map_err(|e| pre(&e))?;
    scene_feats.merge_flags(&scene_est.low_confidence);

    let fgr = FgrParams {
        seed: derive_seed(seed, 1),
        ..config.fgr
    };
    let corr = match_features(
        &model_feats,
        &scene_feats,
        &model_est.cloud,
        &scene_est.cloud,
        &fgr,
    )
    .map_err(RegistrationStageError::Coarse)?;
    let (coarse_transform, coarse_report) =
        fgr_align(&model_est.cloud, &scene_est.cloud, &corr, &fgr)
            .map_err(RegistrationStageError::Coarse)?;

    let icp_source = match config.icp_voxel_mm {
        Some(v) if v > 0.0 => voxel_downsample(full_model, v).map_err(|e| pre(&e))?,
        _ => full_model.clone(),
    };
    let icp_target = match config.variant {
        IcpVariant::PointToPlane => ensure_normals(
            scene_motor,
            config.normal_k,
            NormalOrientation::Viewpoint(Point3::origin()),
        )?,
        IcpVariant::PointToPoint => scene_motor.clone(),
    };
    let (transform, fine_report) = icp_multistep(
        &icp_source,
        &icp_target,
        &coarse_transform,
        &config.schedule,
        config.variant,
    )
    .map_err(RegistrationStageError::Fine)?;

    let mut steps = coarse_report.steps;
    steps.extend(fine_report.steps);
    Ok((
        transform,
        RegistrationReport {
            steps,
            transform,
        },
    ))
}

/// Runs the full pipeline on a binary-labeled scene (camera frame) and a
/// part-labeled full model (model frame). Bolts occluded in the scan are
/// still reported, flagged invisible.
pub fn run_pipeline(
    scene: &PointCloud,
    full_model: &PointCloud,
    config: &PipelineConfig,
) -> Result<PipelineOutput, PipelineError> {
    if scene.frame() != CoordinateFrame::Camera {
        return Err(PipelineError::Input(format!(
            "scene must be in the Camera frame, got {:?}",
            scene.frame()
        )));
    }
    if full_model.frame() != CoordinateFrame::FullModel {
        return Err(PipelineError::Input(format!(
            "full model must be in the FullModel frame, got {:?}",
            full_model.frame()
        )));
    }
    if scene.labels().is_none() {
        return Err(PipelineError::Input(
            "scene needs binary labels (motor foreground vs clamp)".into(),
        ));
    }
    if full_model.labels().is_none() {
        return Err(PipelineError::Input("full model needs part labels".into()));
    }

    // (1) Binary segmentation output: keep the motor, drop the clamp.
    let scene_motor = scene.filter_by_label(PartLabel::MotorForeground);
    if scene_motor.is_empty() {
        return Err(PipelineError::Input(
            "scene contains no motor-foreground points".into(),
        ));
    }

    // (2) Coarse + fine registration, gated on the final RMSE.
    let (model_to_camera, report) =
        register_model_to_scene(full_model, &scene_motor, &config.registration, config.seed)?;
    let rmse = report.final_rmse_mm();
    if !(rmse <= config.registration.rmse_gate_mm) {
        return Err(PipelineError::RegistrationFailed {
            rmse_mm: rmse,
            gate_mm: config.registration.rmse_gate_mm,
        });
    }

    // Part labels and normals on the full model drive clustering and
    // alignment; estimate normals once if the model arrives without them.
    let model_centroid = full_model.centroid().expect("non-empty model");
    let model = ensure_normals(
        full_model,
        config.registration.normal_k,
        NormalOrientation::OutwardFromPoint(model_centroid),
    )?;

    // (3) Bolt positions from DBSCAN on the model's bolt points.
    let bolt_indices = model.indices_with_label(PartLabel::Bolt);
    let clusters: Vec<BoltCluster> = if bolt_indices.is_empty() {
        Vec::new()
    } else {
        let bolt_cloud = model.select(&bolt_indices);
        dbscan(&bolt_cloud, &config.dbscan)?.0
    };

    // (4) Motor orientation from the normal sphere of the housing.
    let sphere = normal_sphere(&model, PartLabel::MainHousing)?;
    let ransac = RansacPlaneParams {
        seed: derive_seed(config.seed, 2),
        ..config.ransac
    };
    let equator = ransac_equator(&sphere, &ransac)?;
    let motor_frame = build_motor_frame(&model, &equator)?;

    // (5) Per-bolt axis from the side rule, then frame transport.
    let t_cb = FramedTransform::new(
        model_to_camera,
        CoordinateFrame::FullModel,
        CoordinateFrame::Camera,
    );
    let t_ba = FramedTransform::new(
        config.camera_to_robot,
        CoordinateFrame::Camera,
        CoordinateFrame::Robot,
    );
    let scene_index = SpatialIndex::build(&scene_motor).expect("non-empty scene");
    let visible_radius = 2.0 * config.dbscan.eps_mm;

    let mut bolts = Vec::with_capacity(clusters.len());
    for (id, cluster) in clusters.iter().enumerate() {
        let side = classify_bolt_side(cluster, &motor_frame)?;
        let axis = bolt_axis_from_side(&motor_frame, side);
        let pose_c = Pose6D::new(cluster.centroid, axis, CoordinateFrame::FullModel)
            .expect("unit axis");
        let pose_b = t_cb.apply_pose(&pose_c).expect("frames chained");
        let pose_a = t_ba.apply_pose(&pose_b).expect("frames chained");
        let in_scene = model_to_camera.apply_point(&cluster.centroid);
        let visible_in_scan =
            scene_index.radius(&in_scene, visible_radius).len() >= VISIBLE_MIN_POINTS;
        bolts.push(BoltResult {
            id,
            pose_c,
            pose_b,
            pose_a,
            side,
            cluster_size: cluster.member_indices.len(),
            visible_in_scan,
        });
    }

    Ok(PipelineOutput {
        bolts,
        report,
        model_to_camera: t_cb,
        motor_frame,
    })
}
