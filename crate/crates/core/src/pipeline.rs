//! End-to-end workflows shared by the command-line interface and the
//! acceptance suite: dataset generation, training, calibration, scoring,
//! benchmark evaluation and streaming monitoring, all file-to-file and
//! deterministic per seed.

use crate::checkpoint::{load_model, save_model};
use crate::dataset::{
    read_episodes, windows_from_episode, write_episodes, DatasetManifest, StoredEpisode,
};
use crate::error::{Error, Result};
use crate::fileio::write_atomic;
use crate::flow::{FlowConfig, FlowModel, ScoreOptions};
use crate::metrics::{evaluate_benchmark, BenchReport};
use crate::monitor::{calibrate, run_monitor, PolicyConfig, ThresholdProfile, Verdict};
use crate::scene_sim::{generate_episode, AnomalyKind, Label, TaskWorld};
use crate::task_codec::TaskCodebook;
use crate::trainer::{train, TrainConfig, TrainReport};
use crate::util::hash_label;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const DEFAULT_EPISODE_LEN: usize = 32;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenDataConfig {
    pub episodes_per_task: usize,
    pub kinds: Vec<AnomalyKind>,
    pub seed: u64,
    pub length: usize,
    /// Window length recorded in the manifest.
    pub window: usize,
}

/// Generate one JSONL file per anomaly kind plus a manifest.
pub fn gen_data(out_dir: &Path, world: &TaskWorld, cfg: &GenDataConfig) -> Result<Vec<String>> {
    if cfg.length < 2 * cfg.window {
        return Err(Error::InvalidDimensions(format!(
            "episode length {} must be at least twice the window {}",
            cfg.length, cfg.window
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for kind in &cfg.kinds {
        let mut episodes = Vec::new();
        for task in world.task_ids() {
            for i in 0..cfg.episodes_per_task {
                let ep_seed = hash_label(cfg.seed, &format!("{task}/{}/{i}", kind.as_str()));
                let ep = generate_episode(world, &task, *kind, ep_seed, cfg.length)?;
                let id = format!("{task}-{}-{i:03}", kind.as_str());
                episodes.push(StoredEpisode::from_episode(&id, &ep));
            }
        }
        let name = format!("{}.jsonl", kind.as_str());
        write_episodes(&out_dir.join(&name), &episodes)?;
        written.push(name);
    }
    let manifest = DatasetManifest {
        window: cfg.window,
        points: world.points_per_frame,
        joints: crate::scene_sim::DEFAULT_JOINTS,
        tasks: world.task_ids(),
        norm_stats: None,
    };
    write_atomic(
        &out_dir.join("manifest.json"),
        &serde_json::to_string_pretty(&manifest)?,
    )?;
    written.push("manifest.json".into());
    Ok(written)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub summary: String,
}

/// Build a model from a codebook and train it on nominal episodes.
pub fn train_pipeline(
    nominal_episodes: &Path,
    codebook_path: &Path,
    out_dir: &Path,
    flow_config: FlowConfig,
    train_config: &TrainConfig,
) -> Result<(FlowModel, TrainOutcome)> {
    let episodes = read_episodes(nominal_episodes)?;
    if episodes.is_empty() {
        return Err(Error::InvalidConfig("no episodes in the dataset".into()));
    }
    let codebook = TaskCodebook::load(codebook_path)?;
    std::fs::create_dir_all(out_dir)?;
    let mut model = FlowModel::new(flow_config, codebook, train_config.seed)?;
    let (report, summary) = train(&mut model, &episodes, train_config, Some(out_dir))?;
    save_model(&out_dir.join("checkpoint.json"), &model)?;
    // Manifest updated with the fitted normalization statistics.
    let manifest = DatasetManifest {
        window: model.config.window,
        points: model.config.n_points,
        joints: model.config.joints,
        tasks: model.codebook.task_ids(),
        norm_stats: Some(model.norm_stats.clone()),
    };
    write_atomic(
        &out_dir.join("manifest.json"),
        &serde_json::to_string_pretty(&manifest)?,
    )?;
    write_atomic(
        &out_dir.join("train_report.json"),
        &serde_json::to_string_pretty(&report)?,
    )?;
    Ok((model, TrainOutcome { report, summary }))
}

/// Calibrate a per-task conformal threshold for every task present in the
/// calibration episodes.
pub fn calibrate_pipeline(
    model: &FlowModel,
    calibration_episodes: &Path,
    alpha: f64,
    seed: u64,
    out_path: &Path,
) -> Result<BTreeMap<String, ThresholdProfile>> {
    let episodes = read_episodes(calibration_episodes)?;
    let mut by_task: BTreeMap<String, Vec<&StoredEpisode>> = BTreeMap::new();
    for ep in &episodes {
        by_task.entry(ep.task_id.clone()).or_default().push(ep);
    }
    let mut profiles = BTreeMap::new();
    for (task, eps) in by_task {
        let mut windows = Vec::new();
        for ep in eps {
            windows.extend(windows_from_episode(ep, model.config.window, 1)?);
        }
        let profile = calibrate(model, &windows, &task, alpha, seed)?;
        profiles.insert(task, profile);
    }
    write_atomic(out_path, &serde_json::to_string_pretty(&profiles)?)?;
    Ok(profiles)
}

pub fn load_profiles(path: &Path) -> Result<BTreeMap<String, ThresholdProfile>> {
    let text = std::fs::read_to_string(path)?;
    let profiles: BTreeMap<String, ThresholdProfile> = serde_json::from_str(&text)?;
    for p in profiles.values() {
        if (p.recompute_upper() - p.upper).abs() > 1e-12 {
            return Err(Error::InvalidConfig(format!(
                "profile {} fails threshold recomputation",
                p.task_id
            )));
        }
    }
    Ok(profiles)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrameScore {
    pub episode_id: String,
    pub task_id: String,
    pub frame: usize,
    pub score: f64,
    pub label: Label,
}

/// Score every frame of every episode (window ending at the frame).
pub fn score_pipeline(
    model: &FlowModel,
    episodes_path: &Path,
    out_path: &Path,
    opts: ScoreOptions,
) -> Result<usize> {
    let episodes = read_episodes(episodes_path)?;
    let mut lines = String::new();
    let mut count = 0usize;
    for ep in &episodes {
        let windows = windows_from_episode(&ep, model.config.window, 1)?;
        let refs: Vec<&_> = windows.iter().collect();
        let scores = crate::flow::anomaly_scores_batched(model, &refs, opts, 64)?;
        for (w, score) in windows.iter().zip(scores) {
            let frame = w.source.1 + model.config.window - 1;
            let rec = FrameScore {
                episode_id: ep.episode_id.clone(),
                task_id: ep.task_id.clone(),
                frame,
                score,
                label: ep.frames[frame].label,
            };
            lines.push_str(&serde_json::to_string(&rec)?);
            lines.push('\n');
            count += 1;
        }
    }
    write_atomic(out_path, &lines)?;
    Ok(count)
}

/// Evaluate the benchmark and write the report plus per-episode score
/// curves as CSV.
pub fn eval_pipeline(
    model: &FlowModel,
    profiles: &BTreeMap<String, ThresholdProfile>,
    episodes_paths: &[std::path::PathBuf],
    out_dir: &Path,
    opts: ScoreOptions,
) -> Result<BenchReport> {
    let mut episodes = Vec::new();
    for path in episodes_paths {
        episodes.extend(read_episodes(path)?);
    }
    let output = evaluate_benchmark(model, profiles, &episodes, opts)?;
    std::fs::create_dir_all(out_dir)?;
    write_atomic(
        &out_dir.join("bench_report.json"),
        &serde_json::to_string_pretty(&output.report)?,
    )?;
    let mut csv = String::from("episode_id,frame,score,upper,label\n");
    for (episode_id, curve) in &output.curves {
        for p in curve {
            csv.push_str(&format!(
                "{episode_id},{},{},{},{}\n",
                p.frame, p.score, p.upper, p.label
            ));
        }
    }
    write_atomic(&out_dir.join("score_curves.csv"), &csv)?;
    Ok(output.report)
}

#[derive(Serialize)]
struct MonitorSummary {
    frames: usize,
    verdicts: usize,
    anomalous: usize,
    events: usize,
    mean_latency_ms: f64,
    max_latency_ms: f64,
}

/// Run the streaming monitor over an episode file and write one verdict
/// record per line, preceded by a summary header line.
pub fn monitor_pipeline(
    model: &FlowModel,
    profiles: &BTreeMap<String, ThresholdProfile>,
    episode: &StoredEpisode,
    policy: PolicyConfig,
    out_path: &Path,
) -> Result<Vec<Verdict>> {
    let profile = profiles
        .get(&episode.task_id)
        .ok_or_else(|| Error::UnknownTask(episode.task_id.clone()))?;
    let frames: Vec<_> = (0..episode.frames.len())
        .map(|t| {
            let (state, points, _) = episode.frame_tuple(t);
            (state, points)
        })
        .collect();
    let verdicts = run_monitor(model, profile, frames, policy)?;
    let latencies: Vec<f64> = verdicts.iter().map(|v| v.latency_ms).collect();
    let summary = MonitorSummary {
        frames: episode.frames.len(),
        verdicts: verdicts.len(),
        anomalous: verdicts
            .iter()
            .filter(|v| v.state == crate::monitor::VerdictState::Anomalous)
            .count(),
        events: verdicts
            .iter()
            .filter(|v| v.event != crate::monitor::MonitorEvent::None)
            .count(),
        mean_latency_ms: latencies.iter().sum::<f64>() / latencies.len().max(1) as f64,
        max_latency_ms: latencies.iter().cloned().fold(0.0, f64::max),
    };
    let mut text = format!("# {}\n", serde_json::to_string(&summary)?);
    for v in &verdicts {
        text.push_str(&serde_json::to_string(v)?);
        text.push('\n');
    }
    write_atomic(out_path, &text)?;
    Ok(verdicts)
}

/// Convenience loader used by several commands.
pub fn load_checkpoint(path: &Path) -> Result<FlowModel> {
    load_model(path)
}
