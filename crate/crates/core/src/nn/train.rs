//! Contrastive pre-training and supervised fine-tuning loops.

use nalgebra::Matrix3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::contrastive::ContrastiveGroup;
use super::graph::Graph;
use super::model::{collect_param_grads, ModelParams};
use super::optim::{adam_step, lr_at, AdamState, TrainSchedule};
use super::regression::{CameraDecoding, FineTuneLossWeights, FrameTarget};
use super::NnError;
use crate::augment::{
    apply_appearance, apply_geometric, augment_frames, sample_appearance, sample_geometric,
    AugmentationPolicy, GeometricParams,
};
use crate::hand::{
    forward_kinematics, matrix_to_rot6d, project_weak_perspective, CameraWeakPerspective,
    HandPose,
};
use crate::image::Image;
use crate::sampling::{build_batch, default_radius, BatchSpec, PairSample, SamplingStrategy};
use crate::synth::{Dataset, SequenceRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    /// Anchors per batch.
    pub m: usize,
    /// Window radius; derived from the frame rate when absent.
    pub radius: Option<usize>,
    pub strategy: SamplingStrategy,
    /// Adds each positive to its own denominator.
    pub include_positive: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            n_pos: 2,
            n_neg: 8,
            m: 32,
            radius: None,
            strategy: SamplingStrategy::linear(),
            include_positive: false,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if !(self.tau > 0.0) {
            return Err(NnError::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        if self.n_pos == 0 || self.n_neg == 0 || self.m == 0 {
            return Err(NnError::InvalidConfig("n_pos, n_neg and m must be positive".into()));
        }
        Ok(())
    }

    pub fn batch_spec(&self, fps: f64) -> BatchSpec {
        BatchSpec {
            m: self.m,
            n_pos: self.n_pos,
            n_neg: self.n_neg,
            strategy: self.strategy,
            radius: self.radius.unwrap_or_else(|| default_radius(fps)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainOptions {
    pub contrastive: ContrastiveConfig,
    pub schedule: TrainSchedule,
    pub policy: AugmentationPolicy,
    /// One geometric draw per anchor group instead of one per frame.
    pub coherent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOptions {
    pub schedule: TrainSchedule,
    pub policy: AugmentationPolicy,
    pub weights: FineTuneLossWeights,
    pub camera: CameraDecoding,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Frame `t` of sequence `s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRef {
    pub sequence: usize,
    pub frame: usize,
}

fn finish_epoch(logs: &mut Vec<EpochLog>, epoch: usize, lr: f64, loss_sum: f64, steps: usize) -> Result<(), NnError> {
    let loss = loss_sum / steps.max(1) as f64;
    if !loss.is_finite() {
        return Err(NnError::NonFinite(format!("training loss at epoch {epoch}")));
    }
    logs.push(EpochLog { epoch, lr, loss });
    Ok(())
}

/// Augmented frames of every anchor group, in batch order, plus the
/// groups indexing them.
fn contrastive_inputs(
    batch: &[PairSample],
    datasets: &[&Dataset],
    opts: &PretrainOptions,
    seeds: &[u64],
) -> (Vec<Image>, Vec<ContrastiveGroup>) {
    let per: Vec<Vec<Image>> = batch
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(s, seed)| {
            let seq = &datasets[s.seq.dataset].sequences[s.seq.sequence];
            let frames: Vec<&Image> = std::iter::once(&s.anchor)
                .chain(&s.positives)
                .chain(&s.negatives)
                .map(|&t| &seq.frames[t])
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            augment_frames(&frames, &opts.policy, opts.coherent, &mut rng, None)
        })
        .collect();
    let mut groups = Vec::with_capacity(batch.len());
    let mut images = Vec::new();
    for (s, imgs) in batch.iter().zip(per) {
        let base = images.len();
        let np = s.positives.len();
        groups.push(ContrastiveGroup {
            anchor: base,
            positives: (base + 1..base + 1 + np).collect(),
            negatives: (base + 1 + np..base + imgs.len()).collect(),
        });
        images.extend(imgs);
    }
    (images, groups)
}

/// One step of contrastive training; returns the batch loss.
pub fn contrastive_step(
    params: &ModelParams,
    images: &[&Image],
    groups: &[ContrastiveGroup],
    cfg: &ContrastiveConfig,
) -> Result<(f64, Vec<super::Tensor>), NnError> {
    let mut g = Graph::new();
    let fv = params.forward(&mut g, params.batch_tensor(images)?, false, true)?;
    let loss = g.contrastive_loss(fv.embedding, groups, cfg.tau, cfg.include_positive)?;
    let mut grads = g.backward(loss)?;
    let value = g.loss_value(loss).unwrap_or(f64::NAN);
    Ok((value, collect_param_grads(params, &fv, &mut grads)))
}

/// Time-contrastive pre-training of the encoder on unlabeled sequences.
/// An epoch draws roughly one anchor per sequence.
pub fn pretrain(
    init: &ModelParams,
    datasets: &[&Dataset],
    opts: &PretrainOptions,
    seed: u64,
) -> Result<(ModelParams, Vec<EpochLog>), NnError> {
    opts.contrastive.validate()?;
    opts.schedule.validate()?;
    opts.policy.validate().map_err(NnError::InvalidConfig)?;
    if datasets.is_empty() || datasets.iter().any(|d| d.sequences.is_empty()) {
        return Err(NnError::EmptyBatch);
    }
    let fps = datasets[0].sequences[0].fps;
    let spec = opts.contrastive.batch_spec(fps);
    let lengths: Vec<Vec<usize>> = datasets.iter().map(|d| d.lengths()).collect();
    let n_seq: usize = lengths.iter().map(Vec::len).sum();
    let steps = n_seq.div_ceil(spec.m).max(1);

    let mut params = init.clone();
    let mut adam = AdamState::new(&params.tensors);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut logs = Vec::with_capacity(opts.schedule.total_epochs);
    for epoch in 0..opts.schedule.total_epochs {
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for step in 0..steps {
            let batch = build_batch(&lengths, &spec, &mut rng)
                .map_err(|e| NnError::InvalidConfig(e.to_string()))?;
            let seeds: Vec<u64> = batch.iter().map(|_| rng.gen()).collect();
            let (images, groups) = contrastive_inputs(&batch, datasets, opts, &seeds);
            let refs: Vec<&Image> = images.iter().collect();
            let (loss, grads) = contrastive_step(&params, &refs, &groups, &opts.contrastive)?;
            lr = lr_at(epoch as f64 + step as f64 / steps as f64, &opts.schedule);
            adam_step(&mut params.tensors, &grads, &mut adam, lr)?;
            loss_sum += loss;
        }
        finish_epoch(&mut logs, epoch, lr, loss_sum, steps)?;
    }
    Ok((params, logs))
}

/// Rotation about the camera axis matching an in-plane image rotation.
fn in_plane_rotation(geo: &GeometricParams) -> Matrix3<f64> {
    let a = geo.linear();
    let (c, s) = (a[0][0] / geo.scale, a[1][0] / geo.scale);
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Labels of a frame after the image has been warped by `geo`.
pub fn transform_target(
    seq: &SequenceRecord,
    frame: usize,
    geo: &GeometricParams,
    template: &crate::hand::KinematicTemplate,
) -> Result<(FrameTarget, CameraWeakPerspective), NnError> {
    let mut pose = seq.poses[frame];
    let mut cam = seq.cam;
    if !geo.is_identity() {
        let rz = in_plane_rotation(geo);
        let wrist = pose.wrist.to_matrix()?;
        pose.wrist = matrix_to_rot6d(&(rz * wrist))?;
        cam.s *= geo.scale;
        cam.t = geo.apply_point(cam.t, seq.frames[frame].width, seq.frames[frame].height);
    }
    let j3d = forward_kinematics(&pose, &seq.shape, template)?;
    let j2d = project_weak_perspective(&j3d, &cam)?;
    Ok((
        FrameTarget {
            pose,
            shape: seq.shape,
            j3d,
            j2d,
        },
        cam,
    ))
}

/// Supervised fine-tuning on the labeled frames `frames` of `dataset`.
pub fn finetune(
    init: &ModelParams,
    dataset: &Dataset,
    frames: &[FrameRef],
    opts: &FinetuneOptions,
    seed: u64,
) -> Result<(ModelParams, Vec<EpochLog>), NnError> {
    opts.schedule.validate()?;
    opts.weights.validate()?;
    opts.policy.validate().map_err(NnError::InvalidConfig)?;
    if frames.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    for f in frames {
        if f.sequence >= dataset.sequences.len() || f.frame >= dataset.sequences[f.sequence].len() {
            return Err(NnError::InvalidConfig(format!("frame {f:?} is not in the dataset")));
        }
    }
    let bs = opts.schedule.batch_size.min(frames.len());
    let steps = frames.len().div_ceil(bs);
    let size = init.config.image_size;

    let mut params = init.clone();
    let mut adam = AdamState::new(&params.tensors);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = frames.to_vec();
    let mut logs = Vec::with_capacity(opts.schedule.total_epochs);
    for epoch in 0..opts.schedule.total_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for (step, chunk) in order.chunks(bs).enumerate() {
            let seeds: Vec<u64> = chunk.iter().map(|_| rng.gen()).collect();
            let prepared: Vec<(Image, FrameTarget)> = chunk
                .par_iter()
                .zip(seeds.par_iter())
                .map(|(f, seed)| {
                    let seq = &dataset.sequences[f.sequence];
                    let mut r = ChaCha8Rng::seed_from_u64(*seed);
                    let geo = sample_geometric(&opts.policy, size, &mut r);
                    let app = sample_appearance(&opts.policy, &mut r);
                    let img = apply_appearance(&apply_geometric(&seq.frames[f.frame], &geo), &app);
                    let (target, _) = transform_target(seq, f.frame, &geo, &dataset.template)?;
                    Ok((img, target))
                })
                .collect::<Result<_, NnError>>()?;
            let refs: Vec<&Image> = prepared.iter().map(|(i, _)| i).collect();
            let targets: Vec<FrameTarget> = prepared.iter().map(|(_, t)| *t).collect();
            let mut g = Graph::new();
            let fv = params.forward(&mut g, params.batch_tensor(&refs)?, true, true)?;
            let head = fv.head.ok_or_else(|| NnError::GraphNotBuilt("head".into()))?;
            let (loss, terms) =
                g.regression_loss(head, &targets, &opts.weights, &opts.camera, &dataset.template)?;
            let mut grads = g.backward(loss)?;
            let grads = collect_param_grads(&params, &fv, &mut grads);
            lr = lr_at(epoch as f64 + step as f64 / steps as f64, &opts.schedule);
            adam_step(&mut params.tensors, &grads, &mut adam, lr)?;
            loss_sum += terms.total;
        }
        finish_epoch(&mut logs, epoch, lr, loss_sum, steps)?;
    }
    Ok((params, logs))
}

/// Decoded predictions for every frame of a sequence.
pub fn predict_sequence(
    params: &ModelParams,
    seq: &SequenceRecord,
    camera: &CameraDecoding,
) -> Result<Vec<(HandPose, crate::hand::HandShape, CameraWeakPerspective)>, NnError> {
    let refs: Vec<&Image> = seq.frames.iter().collect();
    let raw = params.predict_raw(&refs)?;
    raw.data
        .chunks(super::HEAD_DIM)
        .map(|row| {
            let r: Vec<f64> = row.iter().map(|v| *v as f64).collect();
            super::decode_head(&r, camera)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_sequence, SynthConfig};
    use crate::hand::KinematicTemplate;

    fn tiny_dataset(n: usize, size: usize) -> Dataset {
        let template = KinematicTemplate::standard();
        let cfg = SynthConfig {
            n_frames: 24,
            image_size: size,
            ..SynthConfig::default()
        };
        Dataset {
            sequences: (0..n)
                .map(|i| generate_sequence(&cfg, &template, i as u64).unwrap())
                .collect(),
            template,
        }
    }

    #[test]
    fn transformed_labels_follow_the_image() {
        let ds = tiny_dataset(1, 64);
        let seq = &ds.sequences[0];
        let geo = GeometricParams {
            rotation: 30.0,
            scale: 1.2,
            translation: [4.0, -3.0],
        };
        let (t, _) = transform_target(seq, 5, &geo, &ds.template).unwrap();
        for j in 0..21 {
            let expect = geo.apply_point(seq.j2d[5].0[j], 64, 64);
            assert!((t.j2d.0[j][0] - expect[0]).abs() < 1e-9);
            assert!((t.j2d.0[j][1] - expect[1]).abs() < 1e-9);
        }
        let (same, _) = transform_target(seq, 5, &GeometricParams::IDENTITY, &ds.template).unwrap();
        assert_eq!(same.j3d, seq.j3d[5]);
    }

    fn pre_opts() -> PretrainOptions {
        PretrainOptions {
            contrastive: ContrastiveConfig {
                m: 4,
                radius: Some(3),
                n_neg: 4,
                ..ContrastiveConfig::default()
            },
            schedule: TrainSchedule {
                base_lr: 1e-3,
                warmup_epochs: 1,
                total_epochs: 2,
                batch_size: 4,
            },
            policy: AugmentationPolicy::pretrain(),
            coherent: true,
        }
    }

    #[test]
    fn pretrain_is_deterministic() {
        let ds = tiny_dataset(4, 16);
        let init = ModelParams::init(
            &super::super::ModelConfig {
                image_size: 16,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        let (a, la) = pretrain(&init, &[&ds], &pre_opts(), 5).unwrap();
        let (b, lb) = pretrain(&init, &[&ds], &pre_opts(), 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_ne!(a.tensors[0], init.tensors[0]);
        // the head receives no gradient during pre-training
        assert_eq!(a.tensors[11], init.tensors[11]);
    }

    #[test]
    fn finetune_reduces_loss_on_fixed_frames() {
        let ds = tiny_dataset(2, 16);
        let init = ModelParams::init(
            &super::super::ModelConfig {
                image_size: 16,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        let frames: Vec<FrameRef> = (0..8).map(|t| FrameRef { sequence: t % 2, frame: t }).collect();
        let opts = FinetuneOptions {
            schedule: TrainSchedule {
                base_lr: 3e-3,
                warmup_epochs: 0,
                total_epochs: 40,
                batch_size: 8,
            },
            policy: AugmentationPolicy::identity(),
            weights: FineTuneLossWeights::default(),
            camera: CameraDecoding::for_image(16),
        };
        let (a, logs) = finetune(&init, &ds, &frames, &opts, 2).unwrap();
        assert!(logs.last().unwrap().loss < 0.5 * logs[0].loss, "{logs:?}");
        let (b, _) = finetune(&init, &ds, &frames, &opts, 2).unwrap();
        assert_eq!(a, b);
    }
}
