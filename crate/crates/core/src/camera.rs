//! Pinhole cameras with a world-to-camera rigid transform.
//!
//! Camera frame: `+z` looks into the scene, `+x` right, `+y` down. Pixel
//! centers sit at integer image coordinates, so pixel `(col, row)` is the
//! point `(u, v) = (col, row)`.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};

pub type Vec3 = [f64; 3];

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add_scaled(a: Vec3, b: Vec3, t: f64) -> Vec3 {
    [a[0] + t * b[0], a[1] + t * b[1], a[2] + t * b[2]]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major `[R | t]`, mapping world points to camera coordinates.
    pub world_to_cam: [[f64; 4]; 3],
    pub width: usize,
    pub height: usize,
}

/// Result of projecting a world point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl Projection {
    pub fn behind_camera(&self) -> bool {
        self.depth <= 0.0
    }
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0) {
            return arg_err("fx must be positive");
        }
        if !(self.fy > 0.0) {
            return arg_err("fy must be positive");
        }
        if self.width == 0 || self.height == 0 {
            return arg_err("camera image size must be non-zero");
        }
        let r = self.rotation();
        for i in 0..3 {
            for j in 0..3 {
                let d = dot(r[i], r[j]);
                let expected = if i == j { 1.0 } else { 0.0 };
                if (d - expected).abs() > 1e-6 || !d.is_finite() {
                    return arg_err("world_to_cam rotation is not orthonormal");
                }
            }
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`; `up` fixes the roll.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = sub(target, eye);
        if norm(forward) == 0.0 {
            return arg_err("look_at eye and target coincide");
        }
        let z = normalize(forward);
        let side = cross(z, up);
        if norm(side) < 1e-12 {
            return arg_err("look_at up vector is parallel to the view direction");
        }
        // Camera y points down the image.
        let x = normalize(side);
        let y = cross(z, x);
        let rot = [x, y, z];
        let t = [-dot(x, eye), -dot(y, eye), -dot(z, eye)];
        let mut m = [[0.0; 4]; 3];
        for i in 0..3 {
            m[i][..3].copy_from_slice(&rot[i]);
            m[i][3] = t[i];
        }
        let cam = Camera { fx, fy, cx, cy, world_to_cam: m, width, height };
        cam.validate()?;
        Ok(cam)
    }

    pub fn rotation(&self) -> [Vec3; 3] {
        let m = &self.world_to_cam;
        [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ]
    }

    pub fn translation(&self) -> Vec3 {
        let m = &self.world_to_cam;
        [m[0][3], m[1][3], m[2][3]]
    }

    /// Rotates a world-frame vector into the camera frame.
    pub fn rotate_to_cam(&self, v: Vec3) -> Vec3 {
        let r = self.rotation();
        [dot(r[0], v), dot(r[1], v), dot(r[2], v)]
    }

    /// Rotates a camera-frame vector into the world frame.
    pub fn rotate_to_world(&self, v: Vec3) -> Vec3 {
        let r = self.rotation();
        [
            r[0][0] * v[0] + r[1][0] * v[1] + r[2][0] * v[2],
            r[0][1] * v[0] + r[1][1] * v[1] + r[2][1] * v[2],
            r[0][2] * v[0] + r[1][2] * v[1] + r[2][2] * v[2],
        ]
    }

    pub fn to_cam(&self, x: Vec3) -> Vec3 {
        let p = self.rotate_to_cam(x);
        let t = self.translation();
        [p[0] + t[0], p[1] + t[1], p[2] + t[2]]
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vec3 {
        let c = self.rotate_to_world(self.translation());
        [-c[0], -c[1], -c[2]]
    }

    pub fn project(&self, x: Vec3) -> Projection {
        let p = self.to_cam(x);
        Projection {
            u: self.fx * p[0] / p[2] + self.cx,
            v: self.fy * p[1] / p[2] + self.cy,
            depth: p[2],
        }
    }

    /// Unit world-frame direction through image point `(u, v)`.
    pub fn direction(&self, u: f64, v: f64) -> Vec3 {
        let d = [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0];
        normalize(self.rotate_to_world(d))
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= -0.5 && v >= -0.5 && u < self.width as f64 - 0.5 && v < self.height as f64 - 0.5
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity(fx: f64, cx: f64, size: usize) -> Camera {
        Camera {
            fx,
            fy: fx,
            cx,
            cy: cx,
            world_to_cam: [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]],
            width: size,
            height: size,
        }
    }

    #[test]
    fn projection_examples() {
        let cam = identity(100.0, 50.0, 101);
        let p = cam.project([0.0, 0.0, 1.0]);
        assert_eq!((p.u, p.v, p.depth), (50.0, 50.0, 1.0));
        let p = cam.project([0.1, 0.0, 1.0]);
        assert!((p.u - 60.0).abs() < 1e-12 && (p.v - 50.0).abs() < 1e-12 && p.depth == 1.0);
        assert!(cam.project([0.0, 0.0, -1.0]).behind_camera());
    }

    #[test]
    fn look_at_is_consistent() {
        let cam = Camera::look_at(
            [3.0, 1.0, 2.0],
            [0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0],
            40.0,
            40.0,
            16.0,
            16.0,
            33,
            33,
        )
        .unwrap();
        let p = cam.project([0.0, 0.0, 0.0]);
        assert!((p.u - 16.0).abs() < 1e-9 && (p.v - 16.0).abs() < 1e-9);
        assert!((p.depth - 14f64.sqrt()).abs() < 1e-9);
        let c = cam.center();
        assert!(norm(sub(c, [3.0, 1.0, 2.0])) < 1e-12);
        // world up projects upward in the image (smaller v)
        assert!(cam.project([0.0, 0.0, 0.5]).v < 16.0);
    }

    #[test]
    fn validation_rejects_bad_intrinsics_and_rotations() {
        let mut cam = identity(10.0, 5.0, 11);
        assert!(cam.validate().is_ok());
        cam.fx = 0.0;
        assert!(cam.validate().is_err());
        let mut cam = identity(10.0, 5.0, 11);
        cam.world_to_cam[0][0] = 1.1;
        assert!(cam.validate().is_err());
    }
}
