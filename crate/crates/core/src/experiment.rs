//! End-to-end runs: configuration, the ablation arms and embedding
//! coherence.

use serde::{Deserialize, Serialize};

use crate::augment::AugmentationPolicy;
use crate::hand::KinematicTemplate;
use crate::metrics::{evaluate, AlignmentMode, MetricsError, MetricsReport, DEFAULT_THRESHOLDS_MM};
use crate::nn::train::{
    finetune, pretrain, ContrastiveConfig, EpochLog, FinetuneOptions, FrameRef, PretrainOptions,
};
use crate::nn::{
    cosine_sim, CameraDecoding, FineTuneLossWeights, ModelConfig, ModelParams, NnError,
    TrainSchedule,
};
use crate::sampling::{default_radius, SamplingStrategy, StrategyKind};
use crate::synth::{generate_sequences, Dataset, SynthConfig, SynthError};

pub const CONFIG_VERSION: u32 = 1;

/// Offset between the training and held-out sequence seeds.
pub const EVAL_SEED_OFFSET: u64 = 1 << 40;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExperimentArm {
    Baseline,
    TempCLR,
    NoCoherentAug,
    NoProbSampling,
}

impl ExperimentArm {
    pub const ALL: [ExperimentArm; 4] = [
        ExperimentArm::Baseline,
        ExperimentArm::TempCLR,
        ExperimentArm::NoCoherentAug,
        ExperimentArm::NoProbSampling,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ExperimentArm::Baseline => "Baseline",
            ExperimentArm::TempCLR => "TempCLR",
            ExperimentArm::NoCoherentAug => "TempCLR-NoCoherentAug",
            ExperimentArm::NoProbSampling => "TempCLR-NoProbSampling",
        }
    }

    pub fn pretrains(&self) -> bool {
        !matches!(self, ExperimentArm::Baseline)
    }
}

/// Which training frames carry labels during fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelSelection {
    /// The first `sequences` training sequences are labeled.
    pub sequences: usize,
    /// Every `frame_stride`-th frame of a labeled sequence is used.
    pub frame_stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub synth: SynthConfig,
    pub train_sequences: usize,
    pub eval_sequences: usize,
    pub model: ModelConfig,
    pub contrastive: ContrastiveConfig,
    pub pretrain_policy: AugmentationPolicy,
    pub finetune_policy: AugmentationPolicy,
    pub loss_weights: FineTuneLossWeights,
    pub pretrain_schedule: TrainSchedule,
    pub finetune_schedule: TrainSchedule,
    pub labels: LabelSelection,
    /// Derived from the image size when absent.
    pub camera: Option<CameraDecoding>,
    pub ablation_seeds: usize,
    pub arms: Vec<ExperimentArm>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            synth: SynthConfig::default(),
            train_sequences: 200,
            eval_sequences: 20,
            model: ModelConfig::default(),
            contrastive: ContrastiveConfig::default(),
            pretrain_policy: AugmentationPolicy::pretrain(),
            finetune_policy: AugmentationPolicy::finetune(),
            loss_weights: FineTuneLossWeights::default(),
            pretrain_schedule: TrainSchedule {
                base_lr: 1e-3,
                warmup_epochs: 10,
                total_epochs: 50,
                batch_size: 32,
            },
            finetune_schedule: TrainSchedule {
                base_lr: 2e-3,
                warmup_epochs: 2,
                total_epochs: 80,
                batch_size: 128,
            },
            labels: LabelSelection {
                sequences: 10,
                frame_stride: 2,
            },
            camera: None,
            ablation_seeds: 5,
            arms: ExperimentArm::ALL.to_vec(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::InvalidConfig(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("unsupported config version {}", self.version));
        }
        self.synth.validate()?;
        self.model.validate()?;
        self.contrastive.validate()?;
        self.loss_weights.validate()?;
        self.pretrain_schedule.validate()?;
        self.finetune_schedule.validate()?;
        self.pretrain_policy.validate().map_err(ExperimentError::InvalidConfig)?;
        self.finetune_policy.validate().map_err(ExperimentError::InvalidConfig)?;
        if self.model.image_size != self.synth.image_size {
            return bad(format!(
                "model image size {} differs from the synthetic image size {}",
                self.model.image_size, self.synth.image_size
            ));
        }
        if self.labels.frame_stride == 0 {
            return bad("labels.frame_stride must be positive".into());
        }
        if self.ablation_seeds == 0 {
            return bad("ablation_seeds must be positive".into());
        }
        Ok(())
    }

    pub fn camera_decoding(&self) -> CameraDecoding {
        self.camera.unwrap_or_else(|| CameraDecoding::for_image(self.model.image_size))
    }

    pub fn radius(&self) -> usize {
        self.contrastive.radius.unwrap_or_else(|| default_radius(self.synth.fps))
    }

    pub fn pretrain_options(&self, arm: ExperimentArm) -> PretrainOptions {
        let mut contrastive = self.contrastive;
        if arm == ExperimentArm::NoProbSampling {
            contrastive.strategy = SamplingStrategy::new(StrategyKind::Uniform);
        }
        PretrainOptions {
            contrastive,
            schedule: self.pretrain_schedule,
            policy: self.pretrain_policy.clone(),
            coherent: arm != ExperimentArm::NoCoherentAug,
        }
    }

    pub fn finetune_options(&self) -> FinetuneOptions {
        FinetuneOptions {
            schedule: self.finetune_schedule,
            policy: self.finetune_policy.clone(),
            weights: self.loss_weights,
            camera: self.camera_decoding(),
        }
    }

    /// Synthesizes the training and held-out sets in memory.
    pub fn datasets(&self) -> Result<(Dataset, Dataset), ExperimentError> {
        let template = KinematicTemplate::standard();
        let train = generate_sequences(self.train_sequences, &self.synth, &template, self.seed)?;
        let eval = generate_sequences(
            self.eval_sequences,
            &self.synth,
            &template,
            self.seed.wrapping_add(EVAL_SEED_OFFSET),
        )?;
        Ok((
            Dataset {
                template: template.clone(),
                sequences: train,
            },
            Dataset {
                template,
                sequences: eval,
            },
        ))
    }
}

pub fn labeled_frames(dataset: &Dataset, labels: &LabelSelection) -> Vec<FrameRef> {
    dataset
        .sequences
        .iter()
        .take(labels.sequences)
        .enumerate()
        .flat_map(|(s, seq)| {
            (0..seq.len())
                .step_by(labels.frame_stride.max(1))
                .map(move |frame| FrameRef { sequence: s, frame })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmRun {
    pub arm: ExperimentArm,
    pub seed: u64,
    pub pretrain_log: Vec<EpochLog>,
    pub finetune_log: Vec<EpochLog>,
    /// Held-out embedding coherence of the pre-trained encoder.
    pub coherence: Option<CoherenceReport>,
    pub report: MetricsReport,
}

/// Pre-trains (for the TempCLR arms) and fine-tunes with training seed `seed`.
pub fn pretrain_arm(
    cfg: &RunConfig,
    arm: ExperimentArm,
    train: &Dataset,
    seed: u64,
) -> Result<(ModelParams, Vec<EpochLog>), ExperimentError> {
    let init = ModelParams::init(&cfg.model, seed)?;
    if !arm.pretrains() {
        return Ok((init, Vec::new()));
    }
    Ok(pretrain(&init, &[train], &cfg.pretrain_options(arm), seed.wrapping_add(1))?)
}

pub fn finetune_arm(
    cfg: &RunConfig,
    start: &ModelParams,
    train: &Dataset,
    seed: u64,
) -> Result<(ModelParams, Vec<EpochLog>), ExperimentError> {
    let frames = labeled_frames(train, &cfg.labels);
    Ok(finetune(start, train, &frames, &cfg.finetune_options(), seed.wrapping_add(2))?)
}

pub fn run_arm(
    cfg: &RunConfig,
    arm: ExperimentArm,
    train: &Dataset,
    eval: &Dataset,
    seed: u64,
) -> Result<ArmRun, ExperimentError> {
    let (pre, pretrain_log) = pretrain_arm(cfg, arm, train, seed)?;
    let coherence = if arm.pretrains() {
        Some(embedding_coherence(&pre, eval, cfg.radius())?)
    } else {
        None
    };
    let (tuned, finetune_log) = finetune_arm(cfg, &pre, train, seed)?;
    let report = evaluate(&tuned, eval, &cfg.camera_decoding(), &DEFAULT_THRESHOLDS_MM)?;
    Ok(ArmRun {
        arm,
        seed,
        pretrain_log,
        finetune_log,
        coherence,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: ExperimentArm,
    pub name: String,
    pub seeds: Vec<u64>,
    pub pa_epe: Vec<f64>,
    pub accel_error: Vec<f64>,
    pub median_pa_epe: f64,
    pub median_epe: f64,
    pub median_accel_error: f64,
    pub median_pa_accel_error: f64,
    pub median_pa_f5: f64,
    pub median_pa_f15: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: RunConfig,
    pub arms: Vec<ArmSummary>,
    pub runs: Vec<ArmRun>,
}

impl AblationReport {
    pub fn arm(&self, arm: ExperimentArm) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.arm == arm)
    }

    /// One row per arm.
    pub fn table(&self) -> String {
        let mut out = String::from("arm,median_pa_epe_mm,median_epe_mm,median_accel_mm_s2,median_pa_accel_mm_s2,median_pa_f@5,median_pa_f@15\n");
        for a in &self.arms {
            out.push_str(&format!(
                "{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
                a.name,
                a.median_pa_epe,
                a.median_epe,
                a.median_accel_error,
                a.median_pa_accel_error,
                a.median_pa_f5,
                a.median_pa_f15
            ));
        }
        out
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs every configured arm for `ablation_seeds` training seeds on shared
/// data. `progress` is called after each run.
pub fn ablate(
    cfg: &RunConfig,
    mut progress: impl FnMut(&ArmRun),
) -> Result<AblationReport, ExperimentError> {
    cfg.validate()?;
    let (train, eval) = cfg.datasets()?;
    let mut runs = Vec::new();
    for arm in &cfg.arms {
        for i in 0..cfg.ablation_seeds {
            let run = run_arm(cfg, *arm, &train, &eval, cfg.seed.wrapping_add(i as u64))?;
            progress(&run);
            runs.push(run);
        }
    }
    let arms = cfg
        .arms
        .iter()
        .map(|arm| {
            let mine: Vec<&ArmRun> = runs.iter().filter(|r| r.arm == *arm).collect();
            let pick = |f: &dyn Fn(&MetricsReport) -> f64| -> Vec<f64> {
                mine.iter().map(|r| f(&r.report)).collect()
            };
            let pa = |m: &'static str| {
                move |r: &MetricsReport| r.get(AlignmentMode::ProcrustesAligned, m).unwrap_or(f64::NAN)
            };
            let pa_epe = pick(&|r| r.pa_epe());
            let accel = pick(&|r| r.accel_error);
            ArmSummary {
                arm: *arm,
                name: arm.name().to_string(),
                seeds: mine.iter().map(|r| r.seed).collect(),
                median_pa_epe: median(&pa_epe),
                median_epe: median(&pick(&|r| r.get(AlignmentMode::None, "epe").unwrap_or(f64::NAN))),
                median_accel_error: median(&accel),
                median_pa_accel_error: median(&pick(&pa("accel"))),
                median_pa_f5: median(&pick(&pa("f@5"))),
                median_pa_f15: median(&pick(&pa("f@15"))),
                pa_epe,
                accel_error: accel,
            }
        })
        .collect();
    Ok(AblationReport {
        config: cfg.clone(),
        arms,
        runs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoherenceReport {
    pub radius: usize,
    pub in_window: f64,
    pub out_of_window: f64,
    pub margin: f64,
}

/// Mean cosine similarity of same-sequence frame pairs within `radius`
/// frames of each other versus pairs further apart.
pub fn embedding_coherence(
    params: &ModelParams,
    dataset: &Dataset,
    radius: usize,
) -> Result<CoherenceReport, ExperimentError> {
    let (mut sin, mut nin, mut sout, mut nout) = (0.0, 0usize, 0.0, 0usize);
    for seq in &dataset.sequences {
        let refs: Vec<&crate::image::Image> = seq.frames.iter().collect();
        let z = params.encode_batch(&refs)?;
        for a in 0..seq.len() {
            for b in a + 1..seq.len() {
                let s = cosine_sim(z.row(a), z.row(b))?;
                if b - a <= radius {
                    sin += s;
                    nin += 1;
                } else {
                    sout += s;
                    nout += 1;
                }
            }
        }
    }
    if nin == 0 || nout == 0 {
        return Err(ExperimentError::InvalidConfig(
            "sequences too short for in- and out-of-window pairs".into(),
        ));
    }
    let (in_window, out_of_window) = (sin / nin as f64, sout / nout as f64);
    Ok(CoherenceReport {
        radius,
        in_window,
        out_of_window,
        margin: in_window - out_of_window,
    })
}
