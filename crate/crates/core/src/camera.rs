//! Pinhole intrinsics and SE(3) camera poses (world-to-camera convention).

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::math::{is_rotation, matrix_to_quat, quat_to_matrix};

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinholeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl PinholeCamera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        assert!(fx > 0.0 && fy > 0.0, "focal lengths must be positive");
        assert!(width >= 1 && height >= 1, "image must be at least 1x1");
        Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        }
    }
}

/// World-to-camera rigid transform: `p_cam = R * p_world + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl CameraPose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        is_rotation(&self.rotation, tol)
            && self.translation.iter().all(|v| v.is_finite())
    }

    pub fn transform(&self, p_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p_world + self.translation
    }

    /// Camera center in the world frame: `-R^T t`.
    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn inverse(&self) -> CameraPose {
        let rt = self.rotation.transpose();
        CameraPose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self` after `other`: `(self * other).transform(p) == self.transform(other.transform(p))`.
    pub fn compose(&self, other: &CameraPose) -> CameraPose {
        CameraPose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Build from a camera-to-world quaternion `[qx, qy, qz, qw]` and camera
    /// center, the layout used by trajectory files.
    pub fn from_cam_to_world(center: &Vector3<f64>, q_xyzw: &[f64; 4]) -> Self {
        let q_wxyz = [q_xyzw[3], q_xyzw[0], q_xyzw[1], q_xyzw[2]];
        let norm = q_wxyz.iter().map(|v| v * v).sum::<f64>().sqrt();
        let q = [
            q_wxyz[0] / norm,
            q_wxyz[1] / norm,
            q_wxyz[2] / norm,
            q_wxyz[3] / norm,
        ];
        let r_wc = quat_to_matrix(&q);
        let r_cw = r_wc.transpose();
        CameraPose {
            rotation: r_cw,
            translation: -(r_cw * center),
        }
    }

    /// Camera-to-world quaternion `[qx, qy, qz, qw]` (w-positive) and camera
    /// center, the layout used by trajectory files.
    pub fn to_cam_to_world(&self) -> (Vector3<f64>, [f64; 4]) {
        let q = matrix_to_quat(&self.rotation.transpose());
        (self.camera_center(), [q[1], q[2], q[3], q[0]])
    }

    /// World-to-camera pose of a camera at `eye` looking at `target`.
    /// Image x points right, image y points down, z forward into the scene.
    pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> Self {
        let forward = (target - eye).normalize();
        let mut up_ref = *up;
        if forward.cross(&up_ref).norm() < 1e-8 {
            up_ref = Vector3::new(0.0, 1.0, 0.0);
            if forward.cross(&up_ref).norm() < 1e-8 {
                up_ref = Vector3::new(1.0, 0.0, 0.0);
            }
        }
        let right = forward.cross(&up_ref).normalize();
        let down = forward.cross(&right).normalize();
        let rotation = Matrix3::from_rows(&[
            right.transpose(),
            down.transpose(),
            forward.transpose(),
        ]);
        let translation = -(rotation * eye);
        CameraPose {
            rotation,
            translation,
        }
    }
}
