//! Command-line workflows: task-embedding generation, synthetic benchmark
//! data, training, conformal calibration, batch scoring, benchmark
//! evaluation and streaming monitoring.
//!
//! Config precedence is CLI flags over `--config` file over defaults; all
//! randomness in a command derives from its single `--seed`. Exit codes:
//! 0 success, 2 validation problems, 3 runtime failures.

use clap::{Args, Parser, Subcommand};
use flowmon_core::dataset::read_episodes;
use flowmon_core::error::Error;
use flowmon_core::flow::{FlowConfig, ScoreOptions};
use flowmon_core::monitor::PolicyConfig;
use flowmon_core::pipeline::{self, gen_data, load_checkpoint, load_profiles, GenDataConfig};
use flowmon_core::scene_sim::{AnomalyKind, TaskWorld};
use flowmon_core::task_codec::optimize_codebook;
use flowmon_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "flowmon",
    about = "Conditional-flow trajectory monitor: synthetic benchmark, training, calibration, evaluation",
    version
)]
struct Cli {
    /// JSON config file; CLI flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print the resolved configuration as JSON and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize task embeddings on a hypersphere and write the codebook.
    EncodeTasks(EncodeTasksArgs),
    /// Generate synthetic episodes (nominal and/or anomalous).
    GenData(GenDataArgs),
    /// Train the flow on nominal episodes.
    Train(TrainArgs),
    /// Calibrate per-task conformal thresholds from nominal episodes.
    Calibrate(CalibrateArgs),
    /// Score every frame of a dataset with a trained model.
    Score(ScoreArgs),
    /// Evaluate the benchmark (AUC/AP per anomaly kind).
    Eval(EvalArgs),
    /// Stream an episode through the monitor, emitting verdicts.
    Monitor(MonitorArgs),
}

#[derive(Args, Serialize)]
struct EncodeTasksArgs {
    /// Number of tasks (M).
    #[arg(long)]
    tasks: Option<usize>,
    /// Embedding dimension (the sliding-window length T).
    #[arg(long)]
    dim: Option<usize>,
    /// Hypersphere radius.
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "codebook.json")]
    out: PathBuf,
    /// Overwrite an existing output file.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Serialize)]
struct GenDataArgs {
    #[arg(long)]
    episodes_per_task: Option<usize>,
    /// none, gripper_open, gripper_slippage, spatial_misalignment or all.
    #[arg(long, default_value = "all")]
    anomaly: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "data")]
    out_dir: PathBuf,
    /// Frames per episode.
    #[arg(long)]
    length: Option<usize>,
}

#[derive(Args, Serialize)]
struct DimArgs {
    /// Sliding-window length T.
    #[arg(long)]
    window: Option<usize>,
    /// Points per frame N.
    #[arg(long)]
    points: Option<usize>,
    /// Flow steps K.
    #[arg(long)]
    steps: Option<usize>,
    /// Robot joints J.
    #[arg(long)]
    joints: Option<usize>,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// Nominal episode file (JSONL).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    codebook: PathBuf,
    #[arg(long, default_value = "run")]
    out_dir: PathBuf,
    #[command(flatten)]
    dims: DimArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    next_stage_epoch: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    train_stride: Option<usize>,
}

#[derive(Args, Serialize)]
struct CalibrateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Nominal episode file for calibration.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "profiles.json")]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "scores.jsonl")]
    out: PathBuf,
    /// Zero the task-embedding prior mean (ablation).
    #[arg(long)]
    zero_task_embedding: bool,
    /// Zero the robot-state conditioning (ablation).
    #[arg(long)]
    zero_robot_state: bool,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    profiles: PathBuf,
    /// Episode files to evaluate (repeatable).
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    #[arg(long, default_value = "eval")]
    out_dir: PathBuf,
    #[arg(long)]
    zero_task_embedding: bool,
    #[arg(long)]
    zero_robot_state: bool,
}

#[derive(Args, Serialize)]
struct MonitorArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    profiles: PathBuf,
    /// Episode file to stream; `-` reads episode JSON lines from stdin.
    #[arg(long, default_value = "-")]
    input: String,
    #[arg(long, default_value = "verdicts.jsonl")]
    out: PathBuf,
    #[arg(long)]
    persist_k: Option<usize>,
    #[arg(long)]
    hysteresis: Option<f64>,
}

/// Optional values supplied by a `--config` file.
#[derive(Default, Deserialize)]
struct FileConfig {
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    episode_length: Option<usize>,
    #[serde(default)]
    episodes_per_task: Option<usize>,
    #[serde(default)]
    dims: Option<FileDims>,
    #[serde(default)]
    train: Option<FileTrain>,
    #[serde(default)]
    monitor: Option<FileMonitor>,
}

#[derive(Default, Deserialize)]
struct FileDims {
    window: Option<usize>,
    points: Option<usize>,
    steps: Option<usize>,
    joints: Option<usize>,
}

#[derive(Default, Deserialize)]
struct FileTrain {
    epochs: Option<usize>,
    next_stage_epoch: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    grad_clip: Option<f64>,
    bins: Option<usize>,
    train_stride: Option<usize>,
}

#[derive(Default, Deserialize)]
struct FileMonitor {
    alpha: Option<f64>,
    persist_k: Option<usize>,
    hysteresis: Option<f64>,
}

fn load_file_config(path: &Option<PathBuf>) -> Result<FileConfig, Error> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            Ok(serde_json::from_str(&text)?)
        }
    }
}

fn echo_config<T: Serialize>(dir: &Path, cfg: &T) -> Result<(), Error> {
    std::fs::create_dir_all(dir)?;
    flowmon_core::fileio::write_atomic(
        &dir.join("run_config.json"),
        &serde_json::to_string_pretty(cfg)?,
    )?;
    Ok(())
}

fn print_config<T: Serialize>(cfg: &T) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(cfg)?);
    Ok(())
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    let file = load_file_config(&cli.config)?;
    match cli.command {
        Command::EncodeTasks(a) => {
            let tasks = a.tasks.unwrap_or(10);
            let dim = a
                .dim
                .or(file.dims.as_ref().and_then(|d| d.window))
                .unwrap_or(12);
            let radius = a.radius.unwrap_or(5.0);
            let seed = a.seed.or(file.seed).unwrap_or(0);
            let resolved = serde_json::json!({
                "command": "encode-tasks",
                "tasks": tasks, "dim": dim, "radius": radius, "seed": seed,
                "out": a.out,
            });
            if cli.print_config {
                return print_config(&resolved);
            }
            if a.out.exists() && !a.force {
                return Err(Error::InvalidConfig(format!(
                    "{} exists; pass --force to overwrite",
                    a.out.display()
                )));
            }
            let codebook = optimize_codebook(tasks, dim, radius, seed)?;
            codebook.save(&a.out)?;
            println!(
                "wrote {} ({} tasks, T={}, R={}, min angle {:.2} deg)",
                a.out.display(),
                tasks,
                dim,
                radius,
                codebook.min_pairwise_angle
            );
        }
        Command::GenData(a) => {
            let kinds = match a.anomaly.as_str() {
                "all" => vec![
                    AnomalyKind::None,
                    AnomalyKind::GripperOpen,
                    AnomalyKind::GripperSlippage,
                    AnomalyKind::SpatialMisalignment,
                ],
                other => vec![AnomalyKind::parse(other).ok_or_else(|| {
                    Error::InvalidConfig(format!("unknown anomaly kind `{other}`"))
                })?],
            };
            let cfg = GenDataConfig {
                episodes_per_task: a
                    .episodes_per_task
                    .or(file.episodes_per_task)
                    .unwrap_or(50),
                kinds,
                seed: a.seed.or(file.seed).unwrap_or(0),
                length: a
                    .length
                    .or(file.episode_length)
                    .unwrap_or(pipeline::DEFAULT_EPISODE_LEN),
                window: file.dims.as_ref().and_then(|d| d.window).unwrap_or(12),
            };
            let resolved = serde_json::json!({
                "command": "gen-data", "out_dir": a.out_dir, "config": cfg,
            });
            if cli.print_config {
                return print_config(&resolved);
            }
            let world = TaskWorld::standard();
            let files = gen_data(&a.out_dir, &world, &cfg)?;
            echo_config(&a.out_dir, &resolved)?;
            println!("wrote {} file(s) under {}", files.len(), a.out_dir.display());
        }
        Command::Train(a) => {
            let fd = file.dims.unwrap_or_default();
            let ft = file.train.unwrap_or_default();
            let flow_cfg = FlowConfig::with_dims(
                a.dims.window.or(fd.window).unwrap_or(12),
                a.dims.points.or(fd.points).unwrap_or(32),
                a.dims.steps.or(fd.steps).unwrap_or(12),
                a.dims.joints.or(fd.joints).unwrap_or(7),
            );
            let train_cfg = TrainConfig {
                epochs: a.epochs.or(ft.epochs).unwrap_or(100),
                next_stage_epoch: a.next_stage_epoch.or(ft.next_stage_epoch).unwrap_or(30),
                batch_size: a.batch_size.or(ft.batch_size).unwrap_or(64),
                learning_rate: a.learning_rate.or(ft.learning_rate).unwrap_or(1e-3),
                grad_clip: a.grad_clip.or(ft.grad_clip).unwrap_or(5.0),
                seed: a.seed.or(file.seed).unwrap_or(0),
                bins: a.bins.or(ft.bins).unwrap_or(10),
                train_stride: a.train_stride.or(ft.train_stride).unwrap_or(3),
                ..TrainConfig::default()
            };
            let resolved = serde_json::json!({
                "command": "train", "data": a.data, "codebook": a.codebook,
                "out_dir": a.out_dir, "flow": flow_cfg, "train": train_cfg,
            });
            if cli.print_config {
                return print_config(&resolved);
            }
            flow_cfg.validate()?;
            train_cfg.validate()?;
            echo_config(&a.out_dir, &resolved)?;
            let (_, outcome) =
                pipeline::train_pipeline(&a.data, &a.codebook, &a.out_dir, flow_cfg, &train_cfg)?;
            println!("{}", outcome.summary);
        }
        Command::Calibrate(a) => {
            let fm = file.monitor.unwrap_or_default();
            let alpha = a.alpha.or(fm.alpha).unwrap_or(0.05);
            let seed = a.seed.or(file.seed).unwrap_or(0);
            let resolved = serde_json::json!({
                "command": "calibrate", "checkpoint": a.checkpoint, "data": a.data,
                "alpha": alpha, "seed": seed, "out": a.out,
            });
            if cli.print_config {
                return print_config(&resolved);
            }
            let model = load_checkpoint(&a.checkpoint)?;
            let profiles = pipeline::calibrate_pipeline(&model, &a.data, alpha, seed, &a.out)?;
            for (task, p) in &profiles {
                println!(
                    "{task}: mu {:.4} upper {:.4} (n2 {})",
                    p.mu,
                    p.upper,
                    p.deviations.len()
                );
            }
        }
        Command::Score(a) => {
            let resolved = serde_json::json!({
                "command": "score", "checkpoint": a.checkpoint, "data": a.data, "out": a.out,
                "zero_task_embedding": a.zero_task_embedding,
                "zero_robot_state": a.zero_robot_state,
            });
            if cli.print_config {
                return print_config(&resolved);
            }
            let model = load_checkpoint(&a.checkpoint)?;
            let opts = ScoreOptions {
                zero_mu_task: a.zero_task_embedding,
                zero_robot_state: a.zero_robot_state,
            };
            let n = pipeline::score_pipeline(&model, &a.data, &a.out, opts)?;
            println!("scored {n} frames -> {}", a.out.display());
        }
        Command::Eval(a) => {
            let resolved = serde_json::json!({
                "command": "eval", "checkpoint": a.checkpoint, "profiles": a.profiles,
                "data": a.data, "out_dir": a.out_dir,
                "zero_task_embedding": a.zero_task_embedding,
                "zero_robot_state": a.zero_robot_state,
            });
            if cli.print_config {
                return print_config(&resolved);
            }
            let model = load_checkpoint(&a.checkpoint)?;
            let profiles = load_profiles(&a.profiles)?;
            let opts = ScoreOptions {
                zero_mu_task: a.zero_task_embedding,
                zero_robot_state: a.zero_robot_state,
            };
            echo_config(&a.out_dir, &resolved)?;
            let report = pipeline::eval_pipeline(&model, &profiles, &a.data, &a.out_dir, opts)?;
            println!(
                "macro AUC {:.4}  macro AP {:.4}",
                report.macro_auc, report.macro_ap
            );
            for (kind, m) in &report.per_kind {
                println!(
                    "  {kind}: AUC {:.4} AP {:.4} ({} frames)",
                    m.auc, m.ap, m.frames
                );
            }
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::Monitor(a) => {
            let fm = file.monitor.unwrap_or_default();
            let policy = PolicyConfig {
                persist_k: a.persist_k.or(fm.persist_k).unwrap_or(5),
                hysteresis: a.hysteresis.or(fm.hysteresis).unwrap_or(0.0),
            };
            let resolved = serde_json::json!({
                "command": "monitor", "checkpoint": a.checkpoint, "profiles": a.profiles,
                "input": a.input, "out": a.out, "policy": policy,
            });
            if cli.print_config {
                return print_config(&resolved);
            }
            let model = load_checkpoint(&a.checkpoint)?;
            let profiles = load_profiles(&a.profiles)?;
            let episodes = if a.input == "-" {
                use std::io::Read;
                let mut text = String::new();
                std::io::stdin().read_to_string(&mut text)?;
                text.lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(serde_json::from_str)
                    .collect::<Result<Vec<_>, _>>()?
            } else {
                read_episodes(Path::new(&a.input))?
            };
            let mut total_events = 0usize;
            for (i, ep) in episodes.iter().enumerate() {
                let out = if episodes.len() == 1 {
                    a.out.clone()
                } else {
                    a.out.with_extension(format!("{i}.jsonl"))
                };
                let verdicts = pipeline::monitor_pipeline(&model, &profiles, ep, policy, &out)?;
                total_events += verdicts
                    .iter()
                    .filter(|v| v.event != flowmon_core::monitor::MonitorEvent::None)
                    .count();
            }
            println!(
                "monitored {} episode(s), {total_events} event(s)",
                episodes.len()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
