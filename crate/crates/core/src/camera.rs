//! Pinhole cameras `{K, R, t}` with `x_cam = R·x_world + t`. Camera axes are
//! x right, y down, z forward; image coordinate `(u, v)` is continuous, so
//! pixel `(i, j)` has its center at `(i + 0.5, j + 0.5)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Mat3, Vec3};
use crate::render::Ray;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    #[serde(rename = "K")]
    pub k: Mat3,
    #[serde(rename = "R")]
    pub r: Mat3,
    pub t: Vec3,
}

impl Camera {
    /// Camera at `eye` looking at `target` with vertical field of view
    /// `fov_y` (radians) and the principal point at the image center.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, fov_y: f64, width: usize, height: usize) -> Result<Camera> {
        let forward = (target - eye).normalized();
        let right = forward.cross(up);
        if right.norm() < 1e-9 {
            return Err(Error::invalid("look_at: up is parallel to the view direction"));
        }
        let right = right.normalized();
        let down = forward.cross(right);
        let r = Mat3::from_rows(right, down, forward);
        let f = 0.5 * height as f64 / (0.5 * fov_y).tan();
        let k = Mat3 {
            m: [
                [f, 0.0, 0.5 * width as f64],
                [0.0, f, 0.5 * height as f64],
                [0.0, 0.0, 1.0],
            ],
        };
        let cam = Camera {
            width,
            height,
            k,
            r,
            t: -r.mul_vec(eye),
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.k.is_finite() || !self.r.is_finite() || !self.t.is_finite() {
            return Err(Error::invalid("camera has non-finite entries"));
        }
        let err = self.r.orthonormality_error();
        if err > 1e-5 {
            return Err(Error::invalid(format!("rotation is not orthonormal (error {err:.2e})")));
        }
        let k = &self.k.m;
        if k[1][0] != 0.0 || k[2][0] != 0.0 || k[2][1] != 0.0 || k[2][2] != 1.0 {
            return Err(Error::invalid("intrinsics must be upper triangular with K[2][2] = 1"));
        }
        if !(k[0][0] > 0.0 && k[1][1] > 0.0) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera image size must be non-zero"));
        }
        Ok(())
    }

    pub fn center(&self) -> Vec3 {
        -self.r.transpose().mul_vec(self.t)
    }

    /// Unit world-space direction through image coordinate `(u, v)`.
    pub fn direction(&self, u: f64, v: f64) -> Vec3 {
        let k = &self.k.m;
        let y = (v - k[1][2]) / k[1][1];
        let x = (u - k[0][2] - k[0][1] * y) / k[0][0];
        self.r.transpose().mul_vec(Vec3::new(x, y, 1.0)).normalized()
    }

    /// Ray through `(u, v)`; coordinates outside the image are allowed.
    pub fn make_ray(&self, u: f64, v: f64, near: f64, far: f64) -> Result<Ray> {
        Ray::new(self.center(), self.direction(u, v), near, far, (u, v))
    }

    /// Ray through the center of pixel `(i, j)`.
    pub fn pixel_ray(&self, i: i64, j: i64, near: f64, far: f64) -> Result<Ray> {
        self.make_ray(i as f64 + 0.5, j as f64 + 0.5, near, far)
    }

    /// Image coordinates of a world point in front of the camera.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64)> {
        let c = self.r.mul_vec(p) + self.t;
        if c.z <= 0.0 {
            return None;
        }
        let k = &self.k.m;
        let (x, y) = (c.x / c.z, c.y / c.z);
        Some((k[0][0] * x + k[0][1] * y + k[0][2], k[1][1] * y + k[1][2]))
    }

    pub fn optical_axis(&self) -> Vec3 {
        self.r.row(2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> Camera {
        Camera::look_at(
            Vec3::new(4.0, 1.0, 2.0),
            Vec3::ZERO,
            Vec3::new(0.0, 0.0, 1.0),
            0.6,
            64,
            48,
        )
        .unwrap()
    }

    #[test]
    fn principal_point_ray_is_the_optical_axis() {
        let c = cam();
        let ray = c.make_ray(32.0, 24.0, 0.1, 10.0).unwrap();
        assert!((ray.direction - c.optical_axis()).norm() < 1e-12);
        assert!((ray.direction - (-c.center()).normalized()).norm() < 1e-12);
    }

    #[test]
    fn off_image_coordinates_give_valid_rays() {
        let c = cam();
        let ray = c.make_ray(-10.0, -10.0, 0.1, 10.0).unwrap();
        assert!(ray.direction.is_unit(1e-12));
        assert!(ray.direction.dot(c.optical_axis()) < 1.0 - 1e-6);
    }

    #[test]
    fn backproject_then_project_round_trips() {
        let c = cam();
        for &(u, v) in &[(0.5, 0.5), (63.5, 47.5), (-12.0, 70.0), (20.25, 3.75)] {
            let ray = c.make_ray(u, v, 0.1, 10.0).unwrap();
            for d in [0.5, 3.0, 9.0] {
                let (pu, pv) = c.project(ray.at(d)).unwrap();
                assert!((pu - u).abs() < 1e-6 && (pv - v).abs() < 1e-6, "{u},{v} -> {pu},{pv}");
            }
        }
    }

    #[test]
    fn validation_rejects_bad_poses() {
        let mut c = cam();
        c.r.m[0][0] *= 1.01;
        assert!(c.validate().is_err());
        let mut c = cam();
        c.k.m[0][0] = -1.0;
        assert!(c.validate().is_err());
        let mut c = cam();
        c.k.m[1][0] = 0.2;
        assert!(c.validate().is_err());
    }

    #[test]
    fn image_axes_follow_convention() {
        let c = Camera::look_at(Vec3::new(5.0, 0.0, 0.0), Vec3::ZERO, Vec3::new(0.0, 0.0, 1.0), 0.8, 32, 32)
            .unwrap();
        // world +z is up in the image (smaller v)
        let (_, v_up) = c.project(Vec3::new(0.0, 0.0, 0.5)).unwrap();
        assert!(v_up < 16.0);
    }
}
