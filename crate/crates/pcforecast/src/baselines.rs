//! Geometric reference predictors: Identity, Constant Velocity, and Ray
//! Tracing. All three treat the world as static; the latter two extrapolate
//! the sensor motion estimated from the last two poses.

use crate::error::{Error, Result};
use crate::geom::{PointCloud, PoseSE3};
use crate::projection::{project, unproject, SensorIntrinsics};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Identity,
    ConstVel,
    RayTrace,
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(BaselineKind::Identity),
            "constvel" => Ok(BaselineKind::ConstVel),
            "raytrace" => Ok(BaselineKind::RayTrace),
            other => Err(Error::Config(format!(
                "unknown baseline '{other}' (expected identity|constvel|raytrace)"
            ))),
        }
    }
}

impl std::fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            BaselineKind::Identity => "identity",
            BaselineKind::ConstVel => "constvel",
            BaselineKind::RayTrace => "raytrace",
        };
        f.write_str(name)
    }
}

/// Repeats the last received scan for every future step.
pub fn predict_identity(past: &[PointCloud], future: usize) -> Result<Vec<PointCloud>> {
    let last = past
        .last()
        .ok_or_else(|| Error::MissingInput("identity baseline needs at least one scan".into()))?;
    Ok((0..future).map(|_| last.clone()).collect())
}

/// Pose increment between the last two frames: delta = pose_prev⁻¹ ∘ pose_last,
/// i.e. the transform that advances the sensor by one frame.
fn relative_motion(poses: &[PoseSE3]) -> Result<PoseSE3> {
    if poses.len() < 2 {
        return Err(Error::MissingInput(
            "constant-velocity motion needs the poses of the last two frames".into(),
        ));
    }
    let prev = &poses[poses.len() - 2];
    let last = &poses[poses.len() - 1];
    Ok(prev.inverse().compose(last))
}

/// Transforms the last scan by the inverse of the extrapolated sensor motion:
/// prediction at step k expresses the static world in the future sensor frame
/// T_rel⁻ᵏ.
pub fn predict_constant_velocity(
    past: &[PointCloud],
    poses: &[PoseSE3],
    future: usize,
) -> Result<Vec<PointCloud>> {
    let last = past
        .last()
        .ok_or_else(|| Error::MissingInput("constant-velocity baseline needs a scan".into()))?;
    let delta_inv = relative_motion(poses)?.inverse();
    let mut out = Vec::with_capacity(future);
    let mut motion = PoseSE3::identity();
    for _ in 0..future {
        motion = delta_inv.compose(&motion);
        out.push(last.transformed(&motion));
    }
    Ok(out)
}

/// Aggregates all P past scans in each predicted future frame, renders them
/// into one denser range image (closest return wins), and re-projects it.
pub fn predict_ray_tracing(
    past: &[PointCloud],
    poses: &[PoseSE3],
    future: usize,
    intrinsics: &SensorIntrinsics,
) -> Result<Vec<PointCloud>> {
    if past.is_empty() {
        return Err(Error::MissingInput("ray-tracing baseline needs scans".into()));
    }
    if poses.len() != past.len() {
        return Err(Error::MissingInput(format!(
            "ray-tracing baseline needs one pose per past scan ({} poses, {} scans)",
            poses.len(),
            past.len()
        )));
    }
    let delta = relative_motion(poses).unwrap_or_else(|_| PoseSE3::identity());
    let last_pose = poses[poses.len() - 1];
    let mut out = Vec::with_capacity(future);
    for k in 1..=future {
        // Predicted world pose of the sensor at step k.
        let future_pose = last_pose.compose(&delta.power(k));
        let future_inv = future_pose.inverse();
        let mut merged = PointCloud::default();
        for (cloud, pose) in past.iter().zip(poses) {
            let to_future = future_inv.compose(pose);
            merged
                .points
                .extend(cloud.points.iter().map(|p| to_future.transform_point(p)));
        }
        let image = project(&merged, intrinsics);
        out.push(unproject(&image, None));
    }
    Ok(out)
}

/// Runs the selected baseline on one sample's inputs.
pub fn predict(
    kind: BaselineKind,
    past: &[PointCloud],
    poses: Option<&[PoseSE3]>,
    future: usize,
    intrinsics: &SensorIntrinsics,
) -> Result<Vec<PointCloud>> {
    match kind {
        BaselineKind::Identity => predict_identity(past, future),
        BaselineKind::ConstVel => {
            let poses = poses.ok_or_else(|| {
                Error::MissingInput("constant-velocity baseline requires poses".into())
            })?;
            predict_constant_velocity(past, poses, future)
        }
        BaselineKind::RayTrace => {
            let poses = poses.ok_or_else(|| {
                Error::MissingInput("ray-tracing baseline requires poses".into())
            })?;
            predict_ray_tracing(past, poses, future, intrinsics)
        }
    }
}
