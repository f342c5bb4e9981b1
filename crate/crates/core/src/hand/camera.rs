use serde::{Deserialize, Serialize};

use super::kinematics::{Keypoints2D, Keypoints3D, Point3, NUM_JOINTS};
use super::HandError;

/// Scaled orthographic camera: `u = s·x + t_x`, `v = s·y + t_y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraWeakPerspective {
    /// Pixels per meter.
    pub s: f64,
    /// Pixels.
    pub t: [f64; 2],
}

impl CameraWeakPerspective {
    pub fn new(s: f64, t: [f64; 2]) -> Result<Self, HandError> {
        let cam = Self { s, t };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), HandError> {
        if self.s > 0.0 && self.s.is_finite() {
            Ok(())
        } else {
            Err(HandError::InvalidCamera(self.s))
        }
    }
}

pub fn project_weak_perspective(
    j3d: &Keypoints3D,
    cam: &CameraWeakPerspective,
) -> Result<Keypoints2D, HandError> {
    cam.validate()?;
    let mut out = [[0.0; 2]; NUM_JOINTS];
    for (o, p) in out.iter_mut().zip(j3d.0.iter()) {
        *o = [cam.s * p[0] + cam.t[0], cam.s * p[1] + cam.t[1]];
    }
    Ok(Keypoints2D(out))
}

/// Gradients of the projection: `(dL/dj3d, dL/ds, dL/dt)`.
pub fn project_backward(
    j3d: &[Point3],
    cam: &CameraWeakPerspective,
    grad_2d: &[[f64; 2]],
) -> (Vec<Point3>, f64, [f64; 2]) {
    let mut g3 = Vec::with_capacity(j3d.len());
    let mut gs = 0.0;
    let mut gt = [0.0; 2];
    for (p, g) in j3d.iter().zip(grad_2d) {
        g3.push([cam.s * g[0], cam.s * g[1], 0.0]);
        gs += g[0] * p[0] + g[1] * p[1];
        gt[0] += g[0];
        gt[1] += g[1];
    }
    (g3, gs, gt)
}
