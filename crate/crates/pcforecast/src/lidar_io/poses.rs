//! KITTI odometry pose files: one pose per line, 12 space-separated decimals
//! forming a row-major 3x4 matrix.

use crate::error::{Error, Result};
use crate::geom::PoseSE3;
use nalgebra::{Matrix3, Matrix4, Vector3};
use std::fs;
use std::path::Path;

/// Reads poses in file order. KITTI expresses poses in a camera frame; when a
/// 4x4 calibration matrix `calib` (sensor-to-camera) is given, each pose T is
/// replaced by C⁻¹ T C so it acts on sensor-frame coordinates. The default is
/// the identity, i.e. poses are taken as-is.
pub fn read_poses(path: &Path, calib: Option<&Matrix4<f64>>) -> Result<Vec<PoseSE3>> {
    let text = fs::read_to_string(path)?;
    parse_poses(&text, calib).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_poses(text: &str, calib: Option<&Matrix4<f64>>) -> Result<Vec<PoseSE3>> {
    let calib_inv = match calib {
        Some(c) => Some(
            c.try_inverse()
                .ok_or_else(|| Error::Config("calibration matrix is singular".into()))?,
        ),
        None => None,
    };
    let mut poses = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 12 {
            return Err(Error::Format(format!(
                "line {}: expected 12 values, got {}",
                lineno + 1,
                tokens.len()
            )));
        }
        let mut vals = [0.0f64; 12];
        for (i, tok) in tokens.iter().enumerate() {
            vals[i] = tok.parse::<f64>().map_err(|_| {
                Error::Format(format!("line {}: invalid number '{tok}'", lineno + 1))
            })?;
        }
        let rotation = Matrix3::new(
            vals[0], vals[1], vals[2], vals[4], vals[5], vals[6], vals[8], vals[9], vals[10],
        );
        let translation = Vector3::new(vals[3], vals[7], vals[11]);
        let mut pose = PoseSE3::new(rotation, translation);
        if let (Some(c), Some(ci)) = (calib, calib_inv.as_ref()) {
            pose = PoseSE3::from_matrix4(&(ci * pose.to_matrix4() * c));
        }
        let err = pose.orthonormality_error();
        if err > 1e-3 {
            log::warn!(
                "pose line {}: rotation off-orthonormal by {err:.2e}, re-orthonormalizing",
                lineno + 1
            );
        }
        if err > 1e-9 {
            pose = pose.orthonormalized();
        }
        pose.validate()?;
        poses.push(pose);
    }
    Ok(poses)
}

/// Writes poses in the same 12-value row-major layout.
pub fn write_poses(path: &Path, poses: &[PoseSE3]) -> Result<()> {
    let mut out = String::new();
    for p in poses {
        let r = &p.rotation;
        let t = &p.translation;
        let row = [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t[0],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t[1],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t[2],
        ];
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn identity_line() {
        let poses = parse_poses("1 0 0 0 0 1 0 0 0 0 1 0", None).unwrap();
        assert_eq!(poses.len(), 1);
        assert_eq!(poses[0], PoseSE3::identity());
    }

    #[test]
    fn pure_translation() {
        let poses = parse_poses("1 0 0 2 0 1 0 0 0 0 1 0", None).unwrap();
        assert_eq!(poses[0].translation, Vector3::new(2.0, 0.0, 0.0));
        assert_eq!(poses[0].rotation, Matrix3::identity());
    }

    #[test]
    fn wrong_token_count_names_line() {
        let text = "1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 0 0 1 0 0 0 0 1";
        let err = parse_poses(text, None).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        assert!(err.to_string().contains("11"), "{err}");
    }

    #[test]
    fn calibration_conjugates_pose() {
        // Camera frame rotated 90° about z relative to the sensor.
        let rot = nalgebra::Rotation3::from_axis_angle(
            &Vector3::z_axis(),
            std::f64::consts::FRAC_PI_2,
        )
        .into_inner();
        let mut calib = Matrix4::identity();
        calib.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
        // Camera-frame forward translation (0,0,0) with +x motion.
        let poses = parse_poses("1 0 0 3 0 1 0 0 0 0 1 0", Some(&calib)).unwrap();
        // C⁻¹ T C: translation becomes C⁻¹ * (3,0,0).
        let expected = rot.transpose() * Vector3::new(3.0, 0.0, 0.0);
        assert_relative_eq!(poses[0].translation, expected, epsilon = 1e-12);
    }

    #[test]
    fn skewed_rotation_is_repaired() {
        // Off-orthonormal beyond 1e-3; parser re-orthonormalizes.
        let text = "1 0.01 0 0 0 1 0 0 0 0 1 0";
        let poses = parse_poses(text, None).unwrap();
        assert!(poses[0].validate().is_ok());
    }

    #[test]
    fn round_trip_through_text() {
        let pose = PoseSE3::new(
            nalgebra::Rotation3::from_euler_angles(0.02, -0.3, 1.2).into_inner(),
            Vector3::new(4.5, -0.25, 0.125),
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.txt");
        write_poses(&path, &[pose]).unwrap();
        let back = read_poses(&path, None).unwrap();
        assert_relative_eq!(back[0].rotation, pose.rotation, epsilon = 1e-12);
        assert_relative_eq!(back[0].translation, pose.translation, epsilon = 1e-12);
    }
}
