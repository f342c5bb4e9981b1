//! Hand regression head decoding and the supervised fine-tuning loss.
//!
//! The head emits 109 numbers: 96 for the 16 joint rotations (6D each), 10
//! shape coefficients and 3 camera values. The camera scale goes through a
//! softplus so it is always positive.

use serde::{Deserialize, Serialize};

use super::NnError;
use crate::hand::{
    fk_backward, forward_kinematics_cached, project_backward, project_weak_perspective,
    CameraWeakPerspective, HandPose, HandShape, Keypoints2D, Keypoints3D, KinematicTemplate,
    NUM_JOINTS, NUM_SHAPE, POSE_DIM,
};

pub const HEAD_DIM: usize = POSE_DIM + NUM_SHAPE + 3;
const CAM_OFFSET: usize = POSE_DIM + NUM_SHAPE;

/// Affine maps from the raw camera outputs to pixels:
/// `s = scale_unit · softplus(raw_s)`, `t = center + translation_unit · raw_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraDecoding {
    pub scale_unit: f64,
    pub center: [f64; 2],
    pub translation_unit: f64,
}

impl CameraDecoding {
    pub const RAW: CameraDecoding = CameraDecoding {
        scale_unit: 1.0,
        center: [0.0, 0.0],
        translation_unit: 1.0,
    };

    /// Puts `softplus(0)` at three pixels per millimeter-scale unit of image
    /// size and the zero translation at the image center.
    pub fn for_image(size: usize) -> Self {
        let size = size as f64;
        Self {
            scale_unit: 3.0 * size / std::f64::consts::LN_2,
            center: [(size - 1.0) / 2.0; 2],
            translation_unit: size / 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FineTuneLossWeights {
    pub lambda_2d: f64,
    pub lambda_3d: f64,
    pub lambda_theta: f64,
}

impl Default for FineTuneLossWeights {
    fn default() -> Self {
        Self {
            lambda_2d: 0.01,
            lambda_3d: 100.0,
            lambda_theta: 1.0,
        }
    }
}

impl FineTuneLossWeights {
    pub fn validate(&self) -> Result<(), NnError> {
        let w = [self.lambda_2d, self.lambda_3d, self.lambda_theta];
        if w.iter().any(|x| !(*x >= 0.0)) || w.iter().all(|x| *x == 0.0) {
            return Err(NnError::InvalidConfig(
                "loss weights must be non-negative and not all zero".into(),
            ));
        }
        Ok(())
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn decode_head(
    raw: &[f64],
    cam: &CameraDecoding,
) -> Result<(HandPose, HandShape, CameraWeakPerspective), NnError> {
    if raw.len() != HEAD_DIM {
        return Err(NnError::ShapeMismatch(format!(
            "head output has {} values, expected {HEAD_DIM}",
            raw.len()
        )));
    }
    let pose = HandPose::from_flat(&raw[..POSE_DIM]);
    let mut beta = [0.0; NUM_SHAPE];
    beta.copy_from_slice(&raw[POSE_DIM..CAM_OFFSET]);
    let camera = CameraWeakPerspective {
        s: cam.scale_unit * softplus(raw[CAM_OFFSET]),
        t: [
            cam.center[0] + cam.translation_unit * raw[CAM_OFFSET + 1],
            cam.center[1] + cam.translation_unit * raw[CAM_OFFSET + 2],
        ],
    };
    Ok((pose, HandShape::new(beta), camera))
}

/// Ground truth of one labeled frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameTarget {
    pub pose: HandPose,
    pub shape: HandShape,
    pub j3d: Keypoints3D,
    pub j2d: Keypoints2D,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub l2d: f64,
    pub l3d: f64,
    pub theta: f64,
    pub total: f64,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Loss of one frame and, if requested, its gradient w.r.t. the raw head output.
///
/// `L = λ2D·mean|J2D − Ĵ2D| + λ3D·mean|J3D − Ĵ3D| + λΘ·mean((θ,β) − (θ̂,β̂))²`
pub fn finetune_loss_with_grad(
    raw: &[f64],
    target: &FrameTarget,
    weights: &FineTuneLossWeights,
    cam: &CameraDecoding,
    tmpl: &KinematicTemplate,
    want_grad: bool,
) -> Result<(LossTerms, Vec<f64>), NnError> {
    let (pose, shape, camera) = decode_head(raw, cam)?;
    let (j3d, cache) = forward_kinematics_cached(&pose, &shape, tmpl)?;
    let j2d = project_weak_perspective(&j3d, &camera)?;

    let n2 = (NUM_JOINTS * 2) as f64;
    let n3 = (NUM_JOINTS * 3) as f64;
    let nt = (POSE_DIM + NUM_SHAPE) as f64;

    let mut terms = LossTerms::default();
    let mut g2 = vec![[0.0; 2]; NUM_JOINTS];
    let mut g3 = vec![[0.0; 3]; NUM_JOINTS];
    for j in 0..NUM_JOINTS {
        for a in 0..2 {
            let d = j2d.0[j][a] - target.j2d.0[j][a];
            terms.l2d += d.abs() / n2;
            g2[j][a] = weights.lambda_2d * sign(d) / n2;
        }
        for a in 0..3 {
            let d = j3d.0[j][a] - target.j3d.0[j][a];
            terms.l3d += d.abs() / n3;
            g3[j][a] = weights.lambda_3d * sign(d) / n3;
        }
    }
    let gt_flat = target.pose.to_flat();
    let mut g_raw = vec![0.0; if want_grad { HEAD_DIM } else { 0 }];
    for i in 0..POSE_DIM + NUM_SHAPE {
        let (pred, gt) = if i < POSE_DIM {
            (raw[i], gt_flat[i])
        } else {
            (raw[i], target.shape.beta[i - POSE_DIM])
        };
        let d = pred - gt;
        terms.theta += d * d / nt;
        if want_grad {
            g_raw[i] += weights.lambda_theta * 2.0 * d / nt;
        }
    }
    terms.total =
        weights.lambda_2d * terms.l2d + weights.lambda_3d * terms.l3d + weights.lambda_theta * terms.theta;

    if want_grad {
        let (g3_proj, g_s, g_t) = project_backward(&j3d.0, &camera, &g2);
        for (a, b) in g3.iter_mut().zip(&g3_proj) {
            for k in 0..3 {
                a[k] += b[k];
            }
        }
        let (g_pose, g_shape) = fk_backward(&pose, tmpl, &cache, &g3)?;
        for i in 0..POSE_DIM {
            g_raw[i] += g_pose[i];
        }
        for c in 0..NUM_SHAPE {
            g_raw[POSE_DIM + c] += g_shape[c];
        }
        g_raw[CAM_OFFSET] += g_s * cam.scale_unit * sigmoid(raw[CAM_OFFSET]);
        g_raw[CAM_OFFSET + 1] += g_t[0] * cam.translation_unit;
        g_raw[CAM_OFFSET + 2] += g_t[1] * cam.translation_unit;
    }
    Ok((terms, g_raw))
}

pub fn finetune_loss(
    raw: &[f64],
    target: &FrameTarget,
    weights: &FineTuneLossWeights,
    cam: &CameraDecoding,
    tmpl: &KinematicTemplate,
) -> Result<f64, NnError> {
    finetune_loss_with_grad(raw, target, weights, cam, tmpl, false).map(|(t, _)| t.total)
}

/// Inverse of [`decode_head`] for a well-formed prediction.
pub fn encode_head(
    pose: &HandPose,
    shape: &HandShape,
    camera: &CameraWeakPerspective,
    cam: &CameraDecoding,
) -> Vec<f64> {
    let mut raw = pose.to_flat().to_vec();
    raw.extend_from_slice(&shape.beta);
    let y = camera.s / cam.scale_unit;
    // inverse softplus
    raw.push(if y > 20.0 { y } else { y.exp_m1().ln() });
    raw.push((camera.t[0] - cam.center[0]) / cam.translation_unit);
    raw.push((camera.t[1] - cam.center[1]) / cam.translation_unit);
    raw
}
