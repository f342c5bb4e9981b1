//! Differentiable kinematic hand, 6D rotations and the weak-perspective camera.

mod camera;
mod kinematics;
mod rotation;

pub use camera::{project_backward, project_weak_perspective, CameraWeakPerspective};
pub use kinematics::{
    fk_backward, forward_kinematics, forward_kinematics_cached, FkCache, HandPose, HandShape,
    Keypoints2D, Keypoints3D, KinematicTemplate, Point2, Point3, NUM_ARTICULATED, NUM_JOINTS,
    NUM_SHAPE, POSE_DIM,
};
pub use rotation::{
    axis_angle_to_matrix, matrix_to_rot6d, rot6d_to_matrix, rot6d_to_matrix_backward, Rotation6D,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HandError {
    #[error("degenerate 6D rotation: {0}")]
    DegenerateInput(String),
    #[error("matrix is not a rotation (orthonormality error {0:e})")]
    NotARotation(f64),
    #[error("invalid camera scale {0}; must be positive")]
    InvalidCamera(f64),
    #[error("invalid kinematic template: {0}")]
    InvalidTemplate(String),
}
