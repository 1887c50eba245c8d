//! Fixed-intrinsics pinhole camera.

use nalgebra::Matrix2x3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{Vec2, Vec3};

/// Points at or closer than this depth are never visible.
pub const Z_MIN: f64 = 0.1;

pub const DEFAULT_FOCAL: f64 = 500.0;
pub const DEFAULT_IMAGE_SIZE: (u32, u32) = (512, 512);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// Focal length in pixels (`fx = fy`).
    pub focal: f64,
    pub principal: Vec2,
    /// `(width, height)` in pixels.
    pub image_size: (u32, u32),
    pub shot_id: usize,
}

impl Default for Camera {
    fn default() -> Self {
        let (w, h) = DEFAULT_IMAGE_SIZE;
        Camera {
            focal: DEFAULT_FOCAL,
            principal: Vec2::new(w as f64 / 2.0, h as f64 / 2.0),
            image_size: DEFAULT_IMAGE_SIZE,
            shot_id: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub uv: Vec2,
    pub visible: bool,
}

impl Camera {
    pub fn with_shot(shot_id: usize) -> Self {
        Camera {
            shot_id,
            ..Camera::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return Err(Error::invalid("camera", "focal length must be positive"));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(Error::invalid("camera", "image size must be positive"));
        }
        if !self.principal.iter().all(|c| c.is_finite()) {
            return Err(Error::invalid("camera", "non-finite principal point"));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.image_size.0 as f64
    }

    pub fn height(&self) -> f64 {
        self.image_size.1 as f64
    }

    /// Pixel coordinates of `x`, regardless of visibility.
    pub fn project_point(&self, x: &Vec3) -> Vec2 {
        Vec2::new(
            self.focal * x.x / x.z + self.principal.x,
            self.focal * x.y / x.z + self.principal.y,
        )
    }

    pub fn in_bounds(&self, uv: &Vec2) -> bool {
        uv.x >= 0.0 && uv.x <= self.width() && uv.y >= 0.0 && uv.y <= self.height()
    }

    /// Derivative of [`Camera::project_point`] with respect to `x`.
    pub fn projection_jacobian(&self, x: &Vec3) -> Matrix2x3<f64> {
        let iz = 1.0 / x.z;
        let f = self.focal;
        Matrix2x3::new(
            f * iz,
            0.0,
            -f * x.x * iz * iz,
            0.0,
            f * iz,
            -f * x.y * iz * iz,
        )
    }
}

/// Projects every joint; points behind `Z_MIN` or outside the image are
/// flagged invisible rather than rejected.
pub fn project(x: &[Vec3], cam: &Camera) -> Vec<Projection> {
    x.iter()
        .map(|p| {
            if p.z <= Z_MIN {
                let uv = if p.z > 0.0 {
                    cam.project_point(p)
                } else {
                    Vec2::zeros()
                };
                return Projection { uv, visible: false };
            }
            let uv = cam.project_point(p);
            Projection {
                uv,
                visible: cam.in_bounds(&uv),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn optical_axis_hits_principal_point() {
        let p = project(&[Vec3::new(0.0, 0.0, 5.0)], &Camera::default())[0];
        assert_eq!(p.uv, Vec2::new(256.0, 256.0));
        assert!(p.visible);
    }

    #[test]
    fn lateral_offset() {
        let p = project(&[Vec3::new(1.0, 0.0, 5.0)], &Camera::default())[0];
        assert_relative_eq!(p.uv, Vec2::new(356.0, 256.0), epsilon = 1e-12);
    }

    #[test]
    fn behind_camera_is_invisible() {
        assert!(!project(&[Vec3::new(0.0, 0.0, -1.0)], &Camera::default())[0].visible);
        assert!(!project(&[Vec3::new(0.0, 0.0, 0.05)], &Camera::default())[0].visible);
    }

    #[test]
    fn out_of_bounds_is_invisible() {
        assert!(!project(&[Vec3::new(3.0, 0.0, 5.0)], &Camera::default())[0].visible);
    }

    #[test]
    fn validation() {
        assert!(Camera::default().validate().is_ok());
        let bad = Camera {
            focal: 0.0,
            ..Camera::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn scale_invariant_along_rays(
            x in -2.0f64..2.0, y in -2.0f64..2.0, z in 0.5f64..10.0, s in 0.1f64..10.0,
        ) {
            let cam = Camera::default();
            let p = Vec3::new(x, y, z);
            let a = cam.project_point(&p);
            let b = cam.project_point(&(p * s));
            prop_assert!((a - b).norm() < 1e-9);
        }

        #[test]
        fn jacobian_matches_finite_differences(
            x in -2.0f64..2.0, y in -2.0f64..2.0, z in 0.5f64..10.0,
        ) {
            let cam = Camera::default();
            let p = Vec3::new(x, y, z);
            let jac = cam.projection_jacobian(&p);
            let h = 1e-6;
            for c in 0..3 {
                let mut a = p;
                let mut b = p;
                a[c] += h;
                b[c] -= h;
                let fd = (cam.project_point(&a) - cam.project_point(&b)) / (2.0 * h);
                for r in 0..2 {
                    let scale = fd[r].abs().max(1.0);
                    prop_assert!((jac[(r, c)] - fd[r]).abs() / scale < 1e-5);
                }
            }
        }
    }
}
