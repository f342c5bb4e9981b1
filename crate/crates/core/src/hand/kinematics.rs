//! A 21-joint kinematic hand with a linear shape basis on joint positions.
//!
//! Joint order: wrist, then thumb/index/middle/ring/pinky with four joints
//! each (base to tip). The wrist and the first three joints of every finger
//! carry a rotation, giving 16 articulated joints. Finger rotations are local
//! to a bone frame whose x-axis is the rest-pose direction of the bone
//! arriving at the joint.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::rotation::{rot6d_to_matrix, rot6d_to_matrix_backward, Rotation6D};
use super::HandError;

pub const NUM_JOINTS: usize = 21;
pub const NUM_ARTICULATED: usize = 16;
pub const NUM_SHAPE: usize = 10;
pub const POSE_DIM: usize = NUM_ARTICULATED * 6;

pub type Point3 = [f64; 3];
pub type Point2 = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HandPose {
    pub wrist: Rotation6D,
    pub fingers: [Rotation6D; NUM_ARTICULATED - 1],
}

impl Default for HandPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl HandPose {
    pub fn identity() -> Self {
        Self {
            wrist: Rotation6D::IDENTITY,
            fingers: [Rotation6D::IDENTITY; NUM_ARTICULATED - 1],
        }
    }

    /// Rotation of the `m`-th articulated joint (0 = wrist).
    pub fn joint(&self, m: usize) -> &Rotation6D {
        if m == 0 {
            &self.wrist
        } else {
            &self.fingers[m - 1]
        }
    }

    pub fn to_flat(&self) -> [f64; POSE_DIM] {
        let mut out = [0.0; POSE_DIM];
        for m in 0..NUM_ARTICULATED {
            out[m * 6..m * 6 + 6].copy_from_slice(&self.joint(m).0);
        }
        out
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        assert_eq!(flat.len(), POSE_DIM, "pose vector must have {POSE_DIM} entries");
        let rot = |m: usize| {
            let mut r = [0.0; 6];
            r.copy_from_slice(&flat[m * 6..m * 6 + 6]);
            Rotation6D(r)
        };
        let mut fingers = [Rotation6D::IDENTITY; NUM_ARTICULATED - 1];
        for (m, f) in fingers.iter_mut().enumerate() {
            *f = rot(m + 1);
        }
        Self {
            wrist: rot(0),
            fingers,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HandShape {
    pub beta: [f64; NUM_SHAPE],
}

impl HandShape {
    pub const LIMIT: f64 = 3.0;

    pub fn new(beta: [f64; NUM_SHAPE]) -> Self {
        Self { beta }
    }

    pub fn clamped(mut self) -> Self {
        for b in self.beta.iter_mut() {
            *b = b.clamp(-Self::LIMIT, Self::LIMIT);
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoints3D(pub [Point3; NUM_JOINTS]);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoints2D(pub [Point2; NUM_JOINTS]);

impl Keypoints3D {
    pub fn as_slice(&self) -> &[Point3] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KinematicTemplate {
    pub rest_joints: Vec<Point3>,
    pub parent: Vec<Option<usize>>,
    /// `shape_dirs[j][axis][c]`: meters per unit of coefficient `c`.
    pub shape_dirs: Vec<[[f64; NUM_SHAPE]; 3]>,
    pub articulated: Vec<usize>,
}

const FINGER_BASES: [[f64; 2]; 5] = [
    [-0.022, -0.018],
    [-0.022, -0.085],
    [0.0, -0.090],
    [0.019, -0.085],
    [0.035, -0.074],
];
const FINGER_DIRS: [[f64; 2]; 5] = [[-0.75, -0.66], [-0.12, -1.0], [0.0, -1.0], [0.11, -1.0], [0.24, -1.0]];
const FINGER_BONES: [[f64; 3]; 5] = [
    [0.040, 0.032, 0.027],
    [0.040, 0.025, 0.022],
    [0.045, 0.028, 0.024],
    [0.042, 0.026, 0.022],
    [0.033, 0.020, 0.019],
];

impl KinematicTemplate {
    /// The built-in right-hand template lying in the z = 0 plane with the
    /// palm facing +z and the fingers pointing towards -y.
    pub fn standard() -> Self {
        let mut rest = vec![[0.0; 3]; NUM_JOINTS];
        let mut parent = vec![None; NUM_JOINTS];
        let mut dirs = vec![[[0.0; NUM_SHAPE]; 3]; NUM_JOINTS];
        for f in 0..5 {
            let d = Vector3::new(FINGER_DIRS[f][0], FINGER_DIRS[f][1], 0.0).normalize();
            let base = Vector3::new(FINGER_BASES[f][0], FINGER_BASES[f][1], 0.0);
            let mut along = 0.0;
            for s in 0..4 {
                let j = 1 + 4 * f + s;
                parent[j] = Some(if s == 0 { 0 } else { j - 1 });
                if s > 0 {
                    along += FINGER_BONES[f][s - 1];
                }
                let p = base + d * along;
                rest[j] = [p.x, p.y, p.z];
                for a in 0..3 {
                    // uniform scale
                    dirs[j][a][0] = 0.06 * p[a];
                    // finger length
                    dirs[j][a][1] = 0.05 * along * d[a];
                    // palm width
                    dirs[j][a][2] = if a == 0 { 0.08 * base.x } else { 0.0 };
                    for c in 3..NUM_SHAPE {
                        let phase = (j * 31 + a * 7 + c * 13) as f64;
                        dirs[j][a][c] = 0.001 * phase.sin();
                    }
                }
            }
        }
        let articulated = std::iter::once(0)
            .chain((0..5).flat_map(|f| (0..3).map(move |s| 1 + 4 * f + s)))
            .collect();
        Self {
            rest_joints: rest,
            parent,
            shape_dirs: dirs,
            articulated,
        }
    }

    pub fn validate(&self) -> Result<(), HandError> {
        let n = self.rest_joints.len();
        if n != NUM_JOINTS || self.parent.len() != n || self.shape_dirs.len() != n {
            return Err(HandError::InvalidTemplate(format!(
                "expected {NUM_JOINTS} joints in every table"
            )));
        }
        if self.parent[0].is_some() {
            return Err(HandError::InvalidTemplate("joint 0 must be the root".into()));
        }
        for (i, p) in self.parent.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < i => {}
                _ => {
                    return Err(HandError::InvalidTemplate(format!(
                        "joint {i} is not topologically ordered"
                    )))
                }
            }
        }
        if self.articulated.len() != NUM_ARTICULATED
            || self.articulated[0] != 0
            || self.articulated.windows(2).any(|w| w[0] >= w[1])
            || self.articulated.iter().any(|&j| j >= n)
        {
            return Err(HandError::InvalidTemplate(
                "articulated set must be 16 increasing joint indices starting at the root".into(),
            ));
        }
        Ok(())
    }

    pub fn shaped_joints(&self, shape: &HandShape) -> Vec<Vector3<f64>> {
        self.rest_joints
            .iter()
            .zip(&self.shape_dirs)
            .map(|(r, d)| {
                let mut p = Vector3::new(r[0], r[1], r[2]);
                for a in 0..3 {
                    p[a] += d[a].iter().zip(&shape.beta).map(|(x, b)| x * b).sum::<f64>();
                }
                p
            })
            .collect()
    }

    /// Local frame of joint `j`: x along the rest-pose incoming bone, z as
    /// close to the palm normal as possible.
    pub fn bone_frame(&self, j: usize) -> Matrix3<f64> {
        let Some(p) = self.parent[j] else {
            return Matrix3::identity();
        };
        let a = Vector3::from(self.rest_joints[j]);
        let b = Vector3::from(self.rest_joints[p]);
        let x = (a - b).normalize();
        let up = if x.z.abs() < 0.9 { Vector3::z() } else { Vector3::x() };
        let z = (up - x * x.dot(&up)).normalize();
        let y = z.cross(&x);
        Matrix3::from_columns(&[x, y, z])
    }

    fn articulated_slot(&self) -> Vec<Option<usize>> {
        let mut slot = vec![None; self.rest_joints.len()];
        for (m, &j) in self.articulated.iter().enumerate() {
            slot[j] = Some(m);
        }
        slot
    }

    /// Densified point set used for vertex-style metrics: every joint plus
    /// the midpoint of every bone (41 points).
    pub fn virtual_vertices(&self, joints: &[Point3]) -> Vec<Point3> {
        let mut out = joints.to_vec();
        for (i, p) in self.parent.iter().enumerate() {
            if let Some(p) = p {
                let a = joints[i];
                let b = joints[*p];
                out.push([
                    0.5 * (a[0] + b[0]),
                    0.5 * (a[1] + b[1]),
                    0.5 * (a[2] + b[2]),
                ]);
            }
        }
        out
    }
}

/// Intermediate values of a forward pass needed by [`fk_backward`].
#[derive(Debug, Clone)]
pub struct FkCache {
    shaped: Vec<Vector3<f64>>,
    global: Vec<Matrix3<f64>>,
    local: Vec<Matrix3<f64>>,
    frames: Vec<Matrix3<f64>>,
    slot: Vec<Option<usize>>,
}

pub fn forward_kinematics(
    pose: &HandPose,
    shape: &HandShape,
    tmpl: &KinematicTemplate,
) -> Result<Keypoints3D, HandError> {
    forward_kinematics_cached(pose, shape, tmpl).map(|(k, _)| k)
}

pub fn forward_kinematics_cached(
    pose: &HandPose,
    shape: &HandShape,
    tmpl: &KinematicTemplate,
) -> Result<(Keypoints3D, FkCache), HandError> {
    let n = tmpl.rest_joints.len();
    let shaped = tmpl.shaped_joints(shape);
    let slot = tmpl.articulated_slot();
    let mut frames = vec![Matrix3::identity(); n];
    let mut local = vec![Matrix3::identity(); n];
    let mut global = vec![Matrix3::identity(); n];
    let mut pos = vec![Vector3::zeros(); n];

    for j in 0..n {
        if let Some(m) = slot[j] {
            let r = rot6d_to_matrix(pose.joint(m))?;
            frames[j] = tmpl.bone_frame(j);
            // F (R - I) F^T + I keeps the identity rotation exact
            local[j] = frames[j] * (r - Matrix3::identity()) * frames[j].transpose()
                + Matrix3::identity();
        }
        match tmpl.parent[j] {
            None => {
                pos[j] = shaped[j];
                global[j] = local[j];
            }
            Some(p) => {
                let offset = shaped[j] - shaped[p];
                let drift = pos[p] - shaped[p];
                pos[j] = shaped[j] + drift + (global[p] - Matrix3::identity()) * offset;
                global[j] = global[p] * local[j];
            }
        }
    }
    let mut out = [[0.0; 3]; NUM_JOINTS];
    for (o, p) in out.iter_mut().zip(&pos) {
        *o = [p.x, p.y, p.z];
    }
    Ok((
        Keypoints3D(out),
        FkCache {
            shaped,
            global,
            local,
            frames,
            slot,
        },
    ))
}

/// Reverse-mode pass through [`forward_kinematics`]: maps `dL/d joints` to
/// `(dL/d pose, dL/d shape)`.
pub fn fk_backward(
    pose: &HandPose,
    tmpl: &KinematicTemplate,
    cache: &FkCache,
    grad_joints: &[Point3],
) -> Result<([f64; POSE_DIM], [f64; NUM_SHAPE]), HandError> {
    let n = tmpl.rest_joints.len();
    let mut g_pos: Vec<Vector3<f64>> = grad_joints.iter().map(|g| Vector3::from(*g)).collect();
    let mut g_global = vec![Matrix3::zeros(); n];
    let mut g_shaped = vec![Vector3::zeros(); n];
    let mut g_local = vec![Matrix3::zeros(); n];

    for j in (0..n).rev() {
        match tmpl.parent[j] {
            None => {
                g_shaped[j] += g_pos[j];
                g_local[j] += g_global[j];
            }
            Some(p) => {
                // global[j] = global[p] * local[j]
                let gg = g_global[j];
                g_global[p] += gg * cache.local[j].transpose();
                g_local[j] += cache.global[p].transpose() * gg;
                // pos[j] = pos[p] + global[p] * (shaped[j] - shaped[p])
                let gp = g_pos[j];
                let offset = cache.shaped[j] - cache.shaped[p];
                g_pos[p] += gp;
                g_global[p] += gp * offset.transpose();
                let g_off = cache.global[p].transpose() * gp;
                g_shaped[j] += g_off;
                g_shaped[p] -= g_off;
            }
        }
    }

    let mut g_pose = [0.0; POSE_DIM];
    for j in 0..n {
        if let Some(m) = cache.slot[j] {
            let f = cache.frames[j];
            let g_r = f.transpose() * g_local[j] * f;
            let g6 = rot6d_to_matrix_backward(pose.joint(m), &g_r)?;
            g_pose[m * 6..m * 6 + 6].copy_from_slice(&g6);
        }
    }
    let mut g_shape = [0.0; NUM_SHAPE];
    for (g, d) in g_shaped.iter().zip(&tmpl.shape_dirs) {
        for a in 0..3 {
            for c in 0..NUM_SHAPE {
                g_shape[c] += g[a] * d[a][c];
            }
        }
    }
    Ok((g_pose, g_shape))
}

#[cfg(test)]
mod tests {
    use super::super::rotation::{axis_angle_to_matrix, matrix_to_rot6d};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rot(rng: &mut ChaCha8Rng, max_angle: f64) -> Matrix3<f64> {
        let v = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        axis_angle_to_matrix(&(v.normalize() * rng.gen_range(0.0..max_angle)))
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> HandPose {
        let mut p = HandPose::identity();
        p.wrist = matrix_to_rot6d(&random_rot(rng, 3.0)).unwrap();
        for f in p.fingers.iter_mut() {
            *f = matrix_to_rot6d(&random_rot(rng, 1.5)).unwrap();
        }
        p
    }

    fn random_shape(rng: &mut ChaCha8Rng) -> HandShape {
        let mut b = [0.0; NUM_SHAPE];
        for x in b.iter_mut() {
            *x = rng.gen_range(-3.0..3.0);
        }
        HandShape::new(b)
    }

    #[test]
    fn standard_template_is_valid() {
        let t = KinematicTemplate::standard();
        t.validate().unwrap();
        assert_eq!(t.articulated, vec![0, 1, 2, 3, 5, 6, 7, 9, 10, 11, 13, 14, 15, 17, 18, 19]);
        assert_eq!(t.virtual_vertices(&t.rest_joints).len(), 41);
    }

    #[test]
    fn zero_pose_reproduces_rest_joints() {
        let t = KinematicTemplate::standard();
        let k = forward_kinematics(&HandPose::identity(), &HandShape::default(), &t).unwrap();
        assert_eq!(k.0.to_vec(), t.rest_joints);
    }

    #[test]
    fn bone_lengths_are_pose_invariant() {
        let t = KinematicTemplate::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let shape = random_shape(&mut rng);
            let rest = forward_kinematics(&HandPose::identity(), &shape, &t).unwrap();
            let posed = forward_kinematics(&random_pose(&mut rng), &shape, &t).unwrap();
            for j in 1..NUM_JOINTS {
                let p = t.parent[j].unwrap();
                let len = |k: &Keypoints3D| {
                    (Vector3::from(k.0[j]) - Vector3::from(k.0[p])).norm()
                };
                assert!((len(&rest) - len(&posed)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn global_rotation_equivariance() {
        let t = KinematicTemplate::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let shape = random_shape(&mut rng);
            let pose = random_pose(&mut rng);
            let r = random_rot(&mut rng, 3.0);
            let mut rotated = pose;
            rotated.wrist =
                matrix_to_rot6d(&(r * pose.wrist.to_matrix().unwrap())).unwrap();
            let a = forward_kinematics(&pose, &shape, &t).unwrap();
            let b = forward_kinematics(&rotated, &shape, &t).unwrap();
            let root = Vector3::from(a.0[0]);
            for j in 0..NUM_JOINTS {
                let expect = root + r * (Vector3::from(a.0[j]) - root);
                assert!((expect - Vector3::from(b.0[j])).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        let t = KinematicTemplate::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let shape = random_shape(&mut rng);
            let pose = random_pose(&mut rng);
            let w: Vec<Point3> = (0..NUM_JOINTS)
                .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
                .collect();
            let objective = |pose: &HandPose, shape: &HandShape| -> f64 {
                let k = forward_kinematics(pose, shape, &t).unwrap();
                k.0.iter()
                    .zip(&w)
                    .map(|(p, w)| p[0] * w[0] + p[1] * w[1] + p[2] * w[2])
                    .sum()
            };
            let (_, cache) = forward_kinematics_cached(&pose, &shape, &t).unwrap();
            let (gp, gs) = fk_backward(&pose, &t, &cache, &w).unwrap();
            let h = 1e-5;
            let flat = pose.to_flat();
            for k in 0..POSE_DIM {
                let mut a = flat;
                a[k] += h;
                let mut b = flat;
                b[k] -= h;
                let fd = (objective(&HandPose::from_flat(&a), &shape)
                    - objective(&HandPose::from_flat(&b), &shape))
                    / (2.0 * h);
                let scale = fd.abs().max(gp[k].abs()).max(1e-6);
                assert!((fd - gp[k]).abs() / scale < 1e-4, "pose {k}: {fd} vs {}", gp[k]);
            }
            for c in 0..NUM_SHAPE {
                let mut a = shape;
                a.beta[c] += h;
                let mut b = shape;
                b.beta[c] -= h;
                let fd = (objective(&pose, &a) - objective(&pose, &b)) / (2.0 * h);
                let scale = fd.abs().max(gs[c].abs()).max(1e-6);
                assert!((fd - gs[c]).abs() / scale < 1e-4, "shape {c}: {fd} vs {}", gs[c]);
            }
        }
    }
}
