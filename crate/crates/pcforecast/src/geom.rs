//! Point clouds and rigid transforms shared across the pipeline.

use crate::error::{Error, Result};
use nalgebra::{Matrix3, Matrix4, Point3, Vector3};

/// Unordered set of 3D points in the sensor frame, meters.
///
/// Intensities are carried along when a scan file provides them but are
/// ignored by the prediction pipeline.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3<f64>>,
    pub intensities: Option<Vec<f32>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3<f64>>) -> Self {
        PointCloud {
            points,
            intensities: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// All coordinates finite. Empty clouds are legal.
    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(Error::Format(format!("non-finite point at record {i}")));
            }
        }
        Ok(())
    }

    pub fn transformed(&self, pose: &PoseSE3) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| pose.transform_point(p)).collect(),
            intensities: None,
        }
    }

    pub fn centroid(&self) -> Option<Point3<f64>> {
        if self.points.is_empty() {
            return None;
        }
        let sum = self
            .points
            .iter()
            .fold(Vector3::zeros(), |acc, p| acc + p.coords);
        Some(Point3::from(sum / self.points.len() as f64))
    }
}

/// Rigid transform (rotation + translation) between sensor frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl PoseSE3 {
    pub fn identity() -> Self {
        PoseSE3 {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        PoseSE3 {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        PoseSE3 {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Max deviation of RᵀR from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let d = self.rotation.transpose() * self.rotation - Matrix3::identity();
        d.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// RᵀR = I within 1e-6 and det(R) = +1 within 1e-6.
    pub fn validate(&self) -> Result<()> {
        let err = self.orthonormality_error();
        if err > 1e-6 {
            return Err(Error::Format(format!(
                "rotation not orthonormal (max deviation {err:.3e})"
            )));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > 1e-6 {
            return Err(Error::Format(format!("rotation determinant {det} != +1")));
        }
        Ok(())
    }

    /// Nearest rotation matrix in the Frobenius sense (via SVD, det fixed to +1).
    pub fn orthonormalized(&self) -> PoseSE3 {
        let svd = self.rotation.svd(true, true);
        let u = svd.u.expect("svd u");
        let v_t = svd.v_t.expect("svd v_t");
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            // Flip the axis with the smallest singular value.
            let mut u2 = u;
            u2.column_mut(2).neg_mut();
            r = u2 * v_t;
        }
        PoseSE3 {
            rotation: r,
            translation: self.translation,
        }
    }

    pub fn transform_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rt = self.rotation.transpose();
        PoseSE3 {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Composition: (self ∘ other)(p) = self(other(p)).
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// k-fold self-composition; k = 0 yields the identity.
    pub fn power(&self, k: usize) -> PoseSE3 {
        let mut out = PoseSE3::identity();
        for _ in 0..k {
            out = out.compose(self);
        }
        out
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix4(m: &Matrix4<f64>) -> Self {
        PoseSE3 {
            rotation: m.fixed_view::<3, 3>(0, 0).into_owned(),
            translation: m.fixed_view::<3, 1>(0, 3).into_owned(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn compose_and_inverse_round_trip() {
        let a = PoseSE3::new(
            nalgebra::Rotation3::from_euler_angles(0.1, -0.2, 0.3).into_inner(),
            Vector3::new(1.0, 2.0, 3.0),
        );
        let p = Point3::new(4.0, -5.0, 6.0);
        let q = a.inverse().transform_point(&a.transform_point(&p));
        assert_relative_eq!(q, p, epsilon = 1e-12);
        let id = a.compose(&a.inverse());
        assert_relative_eq!(id.rotation, Matrix3::identity(), epsilon = 1e-12);
        assert_relative_eq!(id.translation, Vector3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn orthonormalize_repairs_noise() {
        let mut r = nalgebra::Rotation3::from_euler_angles(0.4, 0.1, -0.7).into_inner();
        r[(0, 1)] += 5e-3;
        let pose = PoseSE3::new(r, Vector3::zeros());
        assert!(pose.validate().is_err());
        let fixed = pose.orthonormalized();
        assert!(fixed.validate().is_ok());
        assert!(fixed.orthonormality_error() < 1e-12);
    }

    #[test]
    fn power_composes_translations() {
        let step = PoseSE3::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let k3 = step.power(3);
        assert_relative_eq!(k3.translation, Vector3::new(3.0, 0.0, 0.0));
        assert_eq!(step.power(0).translation, Vector3::zeros());
    }

    #[test]
    fn cloud_rejects_non_finite() {
        let cloud = PointCloud::new(vec![
            Point3::new(1.0, 2.0, 3.0),
            Point3::new(f64::NAN, 0.0, 0.0),
        ]);
        let err = cloud.validate().unwrap_err();
        assert!(err.to_string().contains("record 1"));
    }
}
