use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use tempclr_core::experiment::{
    ablate, embedding_coherence, finetune_arm, pretrain_arm, ExperimentArm, RunConfig,
    EVAL_SEED_OFFSET,
};
use tempclr_core::hand::KinematicTemplate;
use tempclr_core::metrics::{evaluate, evaluate_predictions, DEFAULT_THRESHOLDS_MM};
use tempclr_core::nn::train::EpochLog;
use tempclr_core::nn::{load_checkpoint, save_checkpoint, Checkpoint, ModelParams};
use tempclr_core::sampling::{audit_sampling, SamplingStrategy, StrategyKind};
use tempclr_core::synth::{load_dataset, make_dataset, Dataset};

#[derive(Parser, Debug)]
#[command(name = "tempclr", version, about = "Time-coherent contrastive pre-training for hand pose reconstruction")]
struct Cli {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "tempclr-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the training and held-out datasets to `<out>/train` and `<out>/eval`.
    Synth,
    /// Contrastive pre-training; writes `pretrain.ckpt` and `pretrain_loss.csv`.
    Pretrain {
        /// Directory written by `synth`; synthesized in memory when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "tempclr")]
        arm: PretrainArm,
    },
    /// Supervised fine-tuning; writes `finetune.ckpt` and `finetune_loss.csv`.
    Finetune {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Pre-trained starting point; a fresh model is used when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a checkpoint on the held-out set; writes `metrics.json` and `metrics.csv`.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Score the ground truth against itself instead of a model.
        #[arg(long)]
        oracle: bool,
    },
    /// Run every experiment arm over the configured seeds; writes `ablation.json` and `ablation.csv`.
    Ablate,
    /// Analytic vs empirical sampling distributions; writes `sampling_audit.csv`.
    AuditSampling {
        /// Window radii to audit; defaults to the configured radius.
        #[arg(long, num_args = 1..)]
        k: Vec<usize>,
        #[arg(long, default_value_t = 100_000)]
        draws: usize,
    },
    /// Embeddings of every frame of a split; writes `embeddings.csv`.
    ExportEmbeddings {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "eval")]
        split: Split,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum PretrainArm {
    Tempclr,
    NoCoherentAug,
    NoProbSampling,
}

impl From<PretrainArm> for ExperimentArm {
    fn from(a: PretrainArm) -> Self {
        match a {
            PretrainArm::Tempclr => ExperimentArm::TempCLR,
            PretrainArm::NoCoherentAug => ExperimentArm::NoCoherentAug,
            PretrainArm::NoProbSampling => ExperimentArm::NoProbSampling,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum Split {
    Train,
    Eval,
}

struct CliError {
    kind: &'static str,
    message: String,
}

impl CliError {
    fn new(kind: &'static str, message: impl ToString) -> Self {
        Self {
            kind,
            message: message.to_string(),
        }
    }
}

macro_rules! from_err {
    ($t:ty, $kind:literal) => {
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::new($kind, e)
            }
        }
    };
}

from_err!(std::io::Error, "io");
from_err!(serde_json::Error, "json");
from_err!(tempclr_core::experiment::ExperimentError, "experiment");
from_err!(tempclr_core::synth::SynthError, "dataset");
from_err!(tempclr_core::nn::NnError, "model");
from_err!(tempclr_core::nn::CheckpointError, "checkpoint");
from_err!(tempclr_core::metrics::MetricsError, "metrics");
from_err!(tempclr_core::sampling::SamplingError, "sampling");

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut value = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::new("config", format!("{}: {e}", p.display())))?;
            serde_json::from_str::<serde_json::Value>(&text)
                .map_err(|e| CliError::new("config", e))?
        }
        None => json!({}),
    };
    if let Some(seed) = cli.seed {
        value["seed"] = json!(seed);
    }
    if value.get("seed").is_none() {
        return Err(CliError::new("config", "a seed is required (--seed or \"seed\" in the config)"));
    }
    let cfg: RunConfig = serde_json::from_value(value).map_err(|e| CliError::new("config", e))?;
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn loss_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from("epoch,lr,loss\n");
    for l in logs {
        let _ = writeln!(out, "{},{},{}", l.epoch, l.lr, l.loss);
    }
    out
}

/// Training and held-out sets, from disk when `data` is given.
fn datasets(cfg: &RunConfig, data: Option<&Path>) -> Result<(Dataset, Dataset), CliError> {
    match data {
        Some(dir) => Ok((load_dataset(&dir.join("train"))?, load_dataset(&dir.join("eval"))?)),
        None => Ok(cfg.datasets()?),
    }
}

fn checkpoint_for(cfg: &RunConfig, params: ModelParams) -> Result<Checkpoint, CliError> {
    Ok(Checkpoint {
        params,
        run_config: serde_json::to_value(cfg)?,
    })
}

fn load_params(cfg: &RunConfig, path: &Path) -> Result<ModelParams, CliError> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.params.config != cfg.model {
        return Err(CliError::new(
            "checkpoint",
            "checkpoint model configuration differs from the run configuration",
        ));
    }
    Ok(ckpt.params)
}

fn run(cli: &Cli) -> Result<serde_json::Value, CliError> {
    let cfg = load_config(cli)?;
    let out = &cli.out;
    fs::create_dir_all(out)?;
    write_json(&out.join("config.json"), &cfg)?;
    match &cli.command {
        Command::Synth => {
            let tmpl = KinematicTemplate::standard();
            let train = make_dataset(&out.join("train"), cfg.train_sequences, &cfg.synth, &tmpl, cfg.seed)?;
            let eval = make_dataset(
                &out.join("eval"),
                cfg.eval_sequences,
                &cfg.synth,
                &tmpl,
                cfg.seed.wrapping_add(EVAL_SEED_OFFSET),
            )?;
            Ok(json!({"train_sequences": train.n_sequences, "eval_sequences": eval.n_sequences}))
        }
        Command::Pretrain { data, arm } => {
            let (train, eval) = datasets(&cfg, data.as_deref())?;
            let (params, logs) = pretrain_arm(&cfg, (*arm).into(), &train, cfg.seed)?;
            fs::write(out.join("pretrain_loss.csv"), loss_csv(&logs))?;
            let coherence = embedding_coherence(&params, &eval, cfg.radius())?;
            save_checkpoint(&out.join("pretrain.ckpt"), &checkpoint_for(&cfg, params)?)?;
            Ok(json!({
                "checkpoint": out.join("pretrain.ckpt"),
                "final_loss": logs.last().map(|l| l.loss),
                "coherence": coherence,
            }))
        }
        Command::Finetune { data, checkpoint } => {
            let (train, _) = datasets(&cfg, data.as_deref())?;
            let start = match checkpoint {
                Some(p) => load_params(&cfg, p)?,
                None => ModelParams::init(&cfg.model, cfg.seed)?,
            };
            let (params, logs) = finetune_arm(&cfg, &start, &train, cfg.seed)?;
            fs::write(out.join("finetune_loss.csv"), loss_csv(&logs))?;
            save_checkpoint(&out.join("finetune.ckpt"), &checkpoint_for(&cfg, params)?)?;
            Ok(json!({
                "checkpoint": out.join("finetune.ckpt"),
                "final_loss": logs.last().map(|l| l.loss),
            }))
        }
        Command::Eval {
            data,
            checkpoint,
            oracle,
        } => {
            let (_, eval) = datasets(&cfg, data.as_deref())?;
            let report = if *oracle {
                let gt: Vec<_> = eval
                    .sequences
                    .iter()
                    .map(|s| s.j3d.iter().map(|k| k.0.to_vec()).collect())
                    .collect();
                evaluate_predictions(&eval, &gt, &DEFAULT_THRESHOLDS_MM)?
            } else {
                let path = checkpoint
                    .as_deref()
                    .ok_or_else(|| CliError::new("usage", "--checkpoint is required"))?;
                let params = load_params(&cfg, path)?;
                evaluate(&params, &eval, &cfg.camera_decoding(), &DEFAULT_THRESHOLDS_MM)?
            };
            write_json(&out.join("metrics.json"), &report)?;
            fs::write(out.join("metrics.csv"), report.to_csv())?;
            Ok(json!({
                "aggregate": report.aggregate,
                "accel_error": report.accel_error,
            }))
        }
        Command::Ablate => {
            let report = ablate(&cfg, |r| {
                println!(
                    "{} seed {}: PA-EPE {:.3} mm, accel {:.1} mm/s^2",
                    r.arm.name(),
                    r.seed,
                    r.report.pa_epe(),
                    r.report.accel_error
                );
            })?;
            write_json(&out.join("ablation.json"), &report)?;
            fs::write(out.join("ablation.csv"), report.table())?;
            Ok(serde_json::to_value(&report.arms)?)
        }
        Command::AuditSampling { k, draws } => {
            let ks = if k.is_empty() { vec![cfg.radius()] } else { k.clone() };
            let n = cfg.synth.n_frames;
            let mut csv = String::from("strategy,k,distance,analytic_p,empirical_p\n");
            for kind in [StrategyKind::Linear, StrategyKind::Exponential, StrategyKind::Tanh] {
                for &kk in &ks {
                    let strategy = SamplingStrategy { kind, sigma: cfg.contrastive.strategy.sigma };
                    let rows = audit_sampling(&strategy, kk, n, n / 2, *draws, cfg.seed)?;
                    for r in rows {
                        let _ = writeln!(csv, "{kind:?},{kk},{},{},{}", r.distance, r.analytic_p, r.empirical_p);
                    }
                }
            }
            fs::write(out.join("sampling_audit.csv"), &csv)?;
            Ok(json!({"rows": csv.lines().count() - 1}))
        }
        Command::ExportEmbeddings {
            data,
            checkpoint,
            split,
        } => {
            let (train, eval) = datasets(&cfg, data.as_deref())?;
            let ds = if *split == Split::Train { &train } else { &eval };
            let params = load_params(&cfg, checkpoint)?;
            let e = params.config.embed_dim;
            let mut csv = String::from("seq_id,frame_index");
            for i in 0..e {
                let _ = write!(csv, ",e{i}");
            }
            csv.push('\n');
            for seq in &ds.sequences {
                let refs: Vec<_> = seq.frames.iter().collect();
                let z = params.encode_batch(&refs)?;
                for t in 0..seq.len() {
                    let _ = write!(csv, "{},{t}", seq.seq_id);
                    for v in z.row(t) {
                        let _ = write!(csv, ",{v}");
                    }
                    csv.push('\n');
                }
            }
            fs::write(out.join("embeddings.csv"), csv)?;
            Ok(json!({"frames": ds.n_frames(), "dim": e}))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            eprintln!("{}", json!({"error": "usage", "message": e.to_string().trim()}));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind, "message": e.message}));
            ExitCode::FAILURE
        }
    }
}
