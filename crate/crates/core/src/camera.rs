//! Pinhole projection with fixed intrinsics.
//!
//! Pixel coordinates are continuous, with the origin at the center of the
//! top-left pixel, `x` to the right and `y` down.

use nalgebra::{Matrix2x3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Points at or closer than this depth (meters) cannot be projected.
pub const Z_MIN: f64 = 1e-6;
pub const DEFAULT_FOCAL: f64 = 5000.0;
pub const DEFAULT_SIZE: (u32, u32) = (224, 224);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProjectionError {
    #[error("point {index} is behind the camera (depth {depth} m)")]
    BehindCamera { index: usize, depth: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid intrinsics: {0}")]
pub struct IntrinsicsError(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub focal: f64,
    pub principal_point: [f64; 2],
    /// `(width, height)` in pixels.
    pub image_size: (u32, u32),
}

impl Default for Intrinsics {
    fn default() -> Self {
        Self::centered(DEFAULT_FOCAL, DEFAULT_SIZE).unwrap()
    }
}

impl Intrinsics {
    /// Principal point at `(W/2, H/2)`.
    pub fn centered(focal: f64, image_size: (u32, u32)) -> Result<Self, IntrinsicsError> {
        let out = Self {
            focal,
            principal_point: [image_size.0 as f64 / 2.0, image_size.1 as f64 / 2.0],
            image_size,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), IntrinsicsError> {
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return Err(IntrinsicsError(format!("focal must be positive, got {}", self.focal)));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(IntrinsicsError("image size must be positive".into()));
        }
        if !self.principal_point.iter().all(|p| p.is_finite()) {
            return Err(IntrinsicsError("principal point must be finite".into()));
        }
        Ok(())
    }
}

/// Intrinsics plus the camera translation applied to model points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub cam_t: [f64; 3],
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, cam_t: [f64; 3]) -> Self {
        Self { intrinsics, cam_t }
    }

    fn camera_point(&self, p: &Vector3<f64>, index: usize) -> Result<Vector3<f64>, ProjectionError> {
        let q = p + Vector3::from(self.cam_t);
        if !(q.z > Z_MIN) {
            return Err(ProjectionError::BehindCamera { index, depth: q.z });
        }
        Ok(q)
    }

    /// Project one point, reporting `index` on failure.
    pub fn project_point(&self, p: &Vector3<f64>, index: usize) -> Result<Vector2<f64>, ProjectionError> {
        let q = self.camera_point(p, index)?;
        let f = self.intrinsics.focal;
        let [cx, cy] = self.intrinsics.principal_point;
        Ok(Vector2::new(f * q.x / q.z + cx, f * q.y / q.z + cy))
    }

    pub fn project(&self, points: &[[f64; 3]]) -> Result<Vec<[f64; 2]>, ProjectionError> {
        points
            .iter()
            .enumerate()
            .map(|(i, p)| self.project_point(&Vector3::from(*p), i).map(Into::into))
            .collect()
    }

    /// Projection and its Jacobian with respect to the model-space point
    /// (identical to the Jacobian with respect to `cam_t`).
    pub fn project_with_jacobian(
        &self,
        p: &Vector3<f64>,
        index: usize,
    ) -> Result<(Vector2<f64>, Matrix2x3<f64>), ProjectionError> {
        let q = self.camera_point(p, index)?;
        let f = self.intrinsics.focal;
        let [cx, cy] = self.intrinsics.principal_point;
        let inv_z = 1.0 / q.z;
        let px = Vector2::new(f * q.x * inv_z + cx, f * q.y * inv_z + cy);
        let jac = Matrix2x3::new(
            f * inv_z,
            0.0,
            -f * q.x * inv_z * inv_z,
            0.0,
            f * inv_z,
            -f * q.y * inv_z * inv_z,
        );
        Ok((px, jac))
    }

    pub fn project_jacobian(&self, p: [f64; 3]) -> Result<[[f64; 3]; 2], ProjectionError> {
        let (_, j) = self.project_with_jacobian(&Vector3::from(p), 0)?;
        Ok([[j[(0, 0)], j[(0, 1)], j[(0, 2)]], [j[(1, 0)], j[(1, 1)], j[(1, 2)]]])
    }

    /// Unit-depth ray direction through a pixel position, in camera space.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vector3<f64> {
        let f = self.intrinsics.focal;
        let [cx, cy] = self.intrinsics.principal_point;
        Vector3::new((u - cx) / f, (v - cy) / f, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cam(t: [f64; 3]) -> Camera {
        Camera::new(Intrinsics::centered(5000.0, (224, 224)).unwrap(), t)
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let p = cam([0.0, 0.0, 5.0]).project(&[[0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(p, vec![[112.0, 112.0]]);
    }

    #[test]
    fn offset_point() {
        let p = cam([0.0, 0.0, 5.0]).project(&[[0.1, 0.0, 0.0]]).unwrap();
        assert!((p[0][0] - 212.0).abs() < 1e-12);
        assert_eq!(p[0][1], 112.0);
    }

    #[test]
    fn zero_depth_is_behind_camera() {
        let err = cam([0.0, 0.0, 5.0])
            .project(&[[0.0, 0.0, 0.0], [0.0, 0.0, -5.0]])
            .unwrap_err();
        assert_eq!(err, ProjectionError::BehindCamera { index: 1, depth: 0.0 });
    }

    #[test]
    fn jacobian_on_axis() {
        let j = cam([0.0, 0.0, 0.0]).project_jacobian([0.0, 0.0, 4.0]).unwrap();
        assert_eq!(j, [[1250.0, 0.0, 0.0], [0.0, 1250.0, 0.0]]);
    }

    #[test]
    fn jacobian_scales_inversely_with_depth() {
        let c = cam([0.0, 0.0, 0.0]);
        let far = c.project_jacobian([0.0, 0.0, 1e-3]).unwrap();
        let near = c.project_jacobian([0.0, 0.0, 5e-4]).unwrap();
        assert!((near[0][0] / far[0][0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_intrinsics() {
        assert!(Intrinsics::centered(0.0, (224, 224)).is_err());
        assert!(Intrinsics::centered(100.0, (0, 224)).is_err());
    }

    fn central_difference(c: &Camera, p: [f64; 3], h: f64) -> [[f64; 3]; 2] {
        let mut out = [[0.0; 3]; 2];
        for i in 0..3 {
            let mut up = p;
            let mut down = p;
            up[i] += h;
            down[i] -= h;
            let a = c.project(&[up]).unwrap()[0];
            let b = c.project(&[down]).unwrap()[0];
            for r in 0..2 {
                out[r][i] = (a[r] - b[r]) / (2.0 * h);
            }
        }
        out
    }

    proptest! {
        #[test]
        fn translation_equivariance(
            x in -1.0..1.0f64, y in -1.0..1.0f64, z in -0.5..0.5f64,
            dx in -0.5..0.5f64, dy in -0.5..0.5f64, dz in -0.5..0.5f64,
        ) {
            let t = [0.1, -0.2, 5.0];
            let shifted = cam([t[0] + dx, t[1] + dy, t[2] + dz]).project(&[[x, y, z]]).unwrap();
            let moved = cam(t).project(&[[x + dx, y + dy, z + dz]]).unwrap();
            let other = cam([0.0; 3]).project(&[[x + t[0] + dx, y + t[1] + dy, z + t[2] + dz]]).unwrap();
            prop_assert!((shifted[0][0] - moved[0][0]).abs() < 1e-9);
            prop_assert!((shifted[0][1] - moved[0][1]).abs() < 1e-9);
            prop_assert!((shifted[0][0] - other[0][0]).abs() < 1e-9);
        }

        #[test]
        fn jacobian_matches_finite_differences(
            x in -1.0..1.0f64, y in -1.0..1.0f64, z in -0.5..0.5f64,
        ) {
            let c = cam([0.0, 0.0, 3.0]);
            let analytic = c.project_jacobian([x, y, z]).unwrap();
            let fd = central_difference(&c, [x, y, z], 1e-6);
            let scale = analytic.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
            for r in 0..2 {
                for i in 0..3 {
                    let err = (analytic[r][i] - fd[r][i]).abs() / scale;
                    prop_assert!(err < 1e-5, "entry ({}, {}) error {}", r, i, err);
                }
            }
        }
    }
}
