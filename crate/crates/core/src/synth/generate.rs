use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{render_frame, Occluder, RenderStyle, MIN_IMAGE_SIZE};
use super::SynthError;
use crate::hand::{
    axis_angle_to_matrix, forward_kinematics, matrix_to_rot6d, project_weak_perspective,
    CameraWeakPerspective, HandPose, HandShape, Keypoints2D, Keypoints3D, KinematicTemplate,
    NUM_ARTICULATED, NUM_SHAPE,
};
use crate::image::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_frames: usize,
    pub fps: f64,
    pub grasp_hold_fraction: f64,
    /// Amplitude (radians) of the smooth per-parameter pose noise.
    pub pose_noise_amplitude: f64,
    pub occluder_probability: f64,
    pub image_size: usize,
    pub background_palette: Vec<[f32; 3]>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_frames: 60,
            fps: 30.0,
            grasp_hold_fraction: 0.3,
            pose_noise_amplitude: 0.04,
            occluder_probability: 0.3,
            image_size: 64,
            background_palette: vec![
                [0.08, 0.08, 0.10],
                [0.22, 0.12, 0.06],
                [0.05, 0.16, 0.10],
                [0.14, 0.14, 0.22],
                [0.25, 0.20, 0.20],
                [0.02, 0.02, 0.02],
            ],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if self.n_frames < 2 {
            return bad("n_frames must be at least 2");
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return bad("fps must be positive");
        }
        if !(0.0..=1.0).contains(&self.grasp_hold_fraction) {
            return bad("grasp_hold_fraction must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.occluder_probability) {
            return bad("occluder_probability must lie in [0, 1]");
        }
        if !(self.pose_noise_amplitude >= 0.0 && self.pose_noise_amplitude.is_finite()) {
            return bad("pose_noise_amplitude must be non-negative");
        }
        if self.image_size < MIN_IMAGE_SIZE {
            return bad("image_size must be at least 16");
        }
        if self.background_palette.is_empty() {
            return bad("background_palette must not be empty");
        }
        Ok(())
    }
}

/// One synthetic video with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord {
    pub seq_id: String,
    pub fps: f64,
    pub shape: HandShape,
    pub cam: CameraWeakPerspective,
    pub poses: Vec<HandPose>,
    pub j3d: Vec<Keypoints3D>,
    pub j2d: Vec<Keypoints2D>,
    pub frames: Vec<Image>,
}

impl SequenceRecord {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let n = self.frames.len();
        if n < 2 || self.poses.len() != n || self.j3d.len() != n || self.j2d.len() != n {
            return Err(SynthError::Corrupt(format!(
                "sequence {} has inconsistent lengths",
                self.seq_id
            )));
        }
        Ok(())
    }
}

/// Joint-angle parameters: wrist axis-angle followed by (flexion, abduction)
/// for each of the 15 finger joints.
const WRIST_PARAMS: usize = 3;
const PARAM_DIM: usize = WRIST_PARAMS + 2 * (NUM_ARTICULATED - 1);

/// (flexion range, abduction range) for the three articulated joints of a finger.
const FINGER_LIMITS: [[(f64, f64); 2]; 3] = [
    [(-0.2, 1.4), (-0.3, 0.3)],
    [(0.0, 1.6), (0.0, 0.0)],
    [(0.0, 1.2), (0.0, 0.0)],
];
const THUMB_LIMITS: [[(f64, f64); 2]; 3] = [
    [(-0.3, 0.8), (-0.5, 0.5)],
    [(0.0, 1.0), (0.0, 0.0)],
    [(0.0, 1.2), (0.0, 0.0)],
];
const WRIST_LIMITS: [(f64, f64); 3] = [(-0.6, 0.6), (-0.6, 0.6), (-0.9, 0.9)];

fn random_params(rng: &mut ChaCha8Rng) -> [f64; PARAM_DIM] {
    let mut p = [0.0; PARAM_DIM];
    for (a, (lo, hi)) in WRIST_LIMITS.iter().enumerate() {
        p[a] = rng.gen_range(*lo..=*hi);
    }
    for f in 0..5 {
        let limits = if f == 0 { &THUMB_LIMITS } else { &FINGER_LIMITS };
        for (s, lim) in limits.iter().enumerate() {
            let base = WRIST_PARAMS + 2 * (3 * f + s);
            for (k, (lo, hi)) in lim.iter().enumerate() {
                p[base + k] = if hi > lo { rng.gen_range(*lo..=*hi) } else { *lo };
            }
        }
    }
    p
}

fn params_to_pose(p: &[f64; PARAM_DIM]) -> HandPose {
    let wrist = axis_angle_to_matrix(&Vector3::new(p[0], p[1], p[2]));
    let mut pose = HandPose::identity();
    pose.wrist = matrix_to_rot6d(&wrist).expect("axis-angle yields a rotation");
    for (m, f) in pose.fingers.iter_mut().enumerate() {
        let flex = p[WRIST_PARAMS + 2 * m];
        let abd = p[WRIST_PARAMS + 2 * m + 1];
        // flexion curls towards the palm normal (+z), abduction spreads in-plane
        let r: Matrix3<f64> = axis_angle_to_matrix(&Vector3::new(0.0, 0.0, abd))
            * axis_angle_to_matrix(&Vector3::new(0.0, -flex, 0.0));
        *f = matrix_to_rot6d(&r).expect("axis-angle yields a rotation");
    }
    pose
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// Deterministically generates one labeled sequence from `(cfg, seed)`.
pub fn generate_sequence(
    cfg: &SynthConfig,
    tmpl: &KinematicTemplate,
    seed: u64,
) -> Result<SequenceRecord, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.n_frames;

    let mut beta = [0.0; NUM_SHAPE];
    for b in beta.iter_mut() {
        *b = rng.gen_range(-1.5..1.5);
    }
    let shape = HandShape::new(beta).clamped();

    let start = random_params(&mut rng);
    let end = random_params(&mut rng);
    let hold = ((cfg.grasp_hold_fraction * n as f64).round() as usize).min(n);
    let moving = n - hold;

    let mut noise = [(0.0, 0.0); PARAM_DIM];
    for (freq, phase) in noise.iter_mut() {
        *freq = rng.gen_range(0.5..2.0);
        *phase = rng.gen_range(0.0..std::f64::consts::TAU);
    }

    let mut poses = Vec::with_capacity(n);
    let mut j3d = Vec::with_capacity(n);
    for t in 0..n {
        let alpha = if t >= moving || moving <= 1 {
            1.0
        } else {
            smoothstep(t as f64 / (moving - 1) as f64)
        };
        let mut p = [0.0; PARAM_DIM];
        for k in 0..PARAM_DIM {
            let (freq, phase) = noise[k];
            let wobble = cfg.pose_noise_amplitude
                * (std::f64::consts::TAU * freq * t as f64 / n as f64 + phase).sin();
            p[k] = start[k] + (end[k] - start[k]) * alpha + wobble;
        }
        let pose = params_to_pose(&p);
        j3d.push(forward_kinematics(&pose, &shape, tmpl)?);
        poses.push(pose);
    }

    let mut centroid = [0.0; 2];
    for k in &j3d {
        for p in &k.0 {
            centroid[0] += p[0];
            centroid[1] += p[1];
        }
    }
    let count = (n * k_len(&j3d)) as f64;
    centroid = centroid.map(|c| c / count);
    let size = cfg.image_size as f64;
    let s = size * rng.gen_range(2.6..3.4);
    let center = (size - 1.0) / 2.0;
    let cam = CameraWeakPerspective::new(
        s,
        [
            center - s * centroid[0] + rng.gen_range(-3.0..3.0),
            center - s * centroid[1] + rng.gen_range(-3.0..3.0),
        ],
    )?;

    let background = cfg.background_palette[rng.gen_range(0..cfg.background_palette.len())];
    let occluded = rng.gen_bool(cfg.occluder_probability);
    let occ_color = [rng.gen(), rng.gen(), rng.gen()];
    let occ_size = (size * rng.gen_range(0.2..0.35)) as usize;

    let mut j2d = Vec::with_capacity(n);
    let mut frames = Vec::with_capacity(n);
    for (t, k) in j3d.iter().enumerate() {
        let proj = project_weak_perspective(k, &cam)?;
        let occluder = if occluded && t >= moving {
            let x0 = rng.gen_range(0..cfg.image_size - occ_size);
            let y0 = rng.gen_range(0..cfg.image_size - occ_size);
            Some(Occluder {
                rect: [x0, y0, x0 + occ_size, y0 + occ_size],
                color: occ_color,
            })
        } else {
            None
        };
        let style = RenderStyle {
            background,
            occluder,
        };
        frames.push(render_frame(&proj, tmpl, &style, cfg.image_size));
        j2d.push(proj);
    }

    Ok(SequenceRecord {
        seq_id: format!("seq-{seed:016x}"),
        fps: cfg.fps,
        shape,
        cam,
        poses,
        j3d,
        j2d,
        frames,
    })
}

fn k_len(j3d: &[Keypoints3D]) -> usize {
    j3d.first().map_or(0, |k| k.0.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(a: &Keypoints3D, b: &Keypoints3D) -> f64 {
        a.0.iter()
            .zip(&b.0)
            .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
            .sum::<f64>()
            / a.0.len() as f64
    }

    #[test]
    fn deterministic_given_seed() {
        let t = KinematicTemplate::standard();
        let cfg = SynthConfig::default();
        assert_eq!(
            generate_sequence(&cfg, &t, 42).unwrap(),
            generate_sequence(&cfg, &t, 42).unwrap()
        );
        assert_ne!(
            generate_sequence(&cfg, &t, 42).unwrap().j3d,
            generate_sequence(&cfg, &t, 43).unwrap().j3d
        );
    }

    #[test]
    fn full_hold_without_noise_is_static() {
        let t = KinematicTemplate::standard();
        let cfg = SynthConfig {
            pose_noise_amplitude: 0.0,
            grasp_hold_fraction: 1.0,
            ..SynthConfig::default()
        };
        let seq = generate_sequence(&cfg, &t, 1).unwrap();
        for w in seq.poses.windows(2) {
            assert_eq!(w[0], w[1]);
        }
        for w in seq.j3d.windows(2) {
            assert_eq!(dist(&w[0], &w[1]), 0.0);
        }
    }

    #[test]
    fn labels_are_consistent() {
        let t = KinematicTemplate::standard();
        let seq = generate_sequence(&SynthConfig::default(), &t, 5).unwrap();
        seq.validate().unwrap();
        for i in 0..seq.len() {
            assert_eq!(seq.j2d[i], project_weak_perspective(&seq.j3d[i], &seq.cam).unwrap());
            let fk = forward_kinematics(&seq.poses[i], &seq.shape, &t).unwrap();
            assert!(dist(&fk, &seq.j3d[i]) < 1e-6);
        }
    }

    #[test]
    fn nearby_frames_are_more_similar() {
        let t = KinematicTemplate::standard();
        let cfg = SynthConfig::default();
        let (mut near, mut far) = (0.0, 0.0);
        for seed in 0..100 {
            let seq = generate_sequence(&cfg, &t, seed).unwrap();
            let n = seq.len();
            near += (0..n - 1).map(|i| dist(&seq.j3d[i], &seq.j3d[i + 1])).sum::<f64>() / (n - 1) as f64;
            far += (0..n - 10).map(|i| dist(&seq.j3d[i], &seq.j3d[i + 10])).sum::<f64>() / (n - 10) as f64;
        }
        assert!(near < far, "{near} vs {far}");
    }

    #[test]
    fn invalid_config_rejected() {
        let t = KinematicTemplate::standard();
        for cfg in [
            SynthConfig { n_frames: 1, ..SynthConfig::default() },
            SynthConfig { grasp_hold_fraction: 1.5, ..SynthConfig::default() },
            SynthConfig { occluder_probability: -0.1, ..SynthConfig::default() },
            SynthConfig { image_size: 8, ..SynthConfig::default() },
        ] {
            assert!(matches!(
                generate_sequence(&cfg, &t, 0),
                Err(SynthError::InvalidConfig(_))
            ));
        }
    }
}
