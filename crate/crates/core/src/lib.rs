//! Multi-stage 6D bolt-pose estimation on 3D point clouds.
//!
//! Given a segmented single-view scan of a clamped motor (camera frame) and
//! a segmented full motor model (model frame), the pipeline registers the
//! model onto the scan (FPFH + fast global registration, then multi-step ICP
//! with a decreasing match distance), clusters the model's bolt points with
//! DBSCAN for bolt positions, recovers the motor axis triad from the normal
//! sphere of the housing, and transports every bolt pose into the camera and
//! robot frames. A deterministic synthetic motor-scene generator provides
//! ground truth for end-to-end validation.

pub mod alignment;
pub mod cluster;
pub mod coarse;
pub mod fine;
pub mod fpfh;
pub mod geometry;
pub mod index;
pub mod normals;
pub mod parallel;
pub mod pipeline;
pub mod reference;
pub mod synth;
pub mod voxel;

pub use geometry::{
    CoordinateFrame, FramedTransform, GeomError, PartLabel, Point3, PointCloud, Pose6D,
    RigidTransform, Vector3,
};
pub use index::SpatialIndex;
pub use voxel::voxel_downsample;
