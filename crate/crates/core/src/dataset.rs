//! Windowing episodes into model inputs, robot-state normalization, the
//! on-disk episode format, and the two-stage debiasing sampler.

use crate::error::{Error, Result};
use crate::scene_sim::{AnomalyKind, Episode, Label, PointFrame, RobotStateFrame};
use crate::util::rng_from;
use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

/// One model input: a point window `x`, the aligned robot states `s`, the
/// task, and the window-level label.
#[derive(Clone, Debug)]
pub struct Window {
    /// `[T, N, 2]` normalized point coordinates.
    pub x: Array3<f64>,
    /// `[T, J+1+7]` raw (un-normalized) robot state rows.
    pub s: Array2<f64>,
    pub task_id: String,
    pub label: Label,
    /// (episode id, start frame).
    pub source: (String, usize),
}

/// Normalized sampling weights over a window set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleWeights {
    pub weights: Vec<f64>,
}

/// Per-dimension affine normalization for robot states, computed on the
/// training split and persisted with the model.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn fit(windows: &[Window]) -> NormStats {
        let dim = windows[0].s.ncols();
        let mut mean = vec![0.0; dim];
        let mut count = 0usize;
        for w in windows {
            for row in w.s.rows() {
                for (m, v) in mean.iter_mut().zip(row.iter()) {
                    *m += v;
                }
                count += 1;
            }
        }
        for m in mean.iter_mut() {
            *m /= count as f64;
        }
        let mut var = vec![0.0; dim];
        for w in windows {
            for row in w.s.rows() {
                for (s, (v, m)) in var.iter_mut().zip(row.iter().zip(&mean)) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let std = var
            .into_iter()
            .map(|v| (v / count as f64).sqrt().max(1e-6))
            .collect();
        NormStats { mean, std }
    }

    pub fn apply(&self, s: &Array2<f64>) -> Array2<f64> {
        let mut out = s.clone();
        for mut row in out.rows_mut() {
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[i]) / self.std[i];
            }
        }
        out
    }
}

/// An episode as stored on disk (one JSON document per line).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StoredEpisode {
    pub episode_id: String,
    pub task_id: String,
    pub anomaly_kind: AnomalyKind,
    pub t_anomaly: Option<usize>,
    pub frames: Vec<StoredFrame>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StoredFrame {
    pub joints: Vec<f64>,
    pub gripper: f64,
    pub pose: [f64; 7],
    pub points: Vec<[f64; 2]>,
    pub label: Label,
}

impl StoredEpisode {
    pub fn from_episode(episode_id: &str, ep: &Episode) -> StoredEpisode {
        StoredEpisode {
            episode_id: episode_id.to_string(),
            task_id: ep.task_id.clone(),
            anomaly_kind: ep.anomaly_kind,
            t_anomaly: ep.t_anomaly,
            frames: ep
                .frames
                .iter()
                .map(|(state, pf, label)| StoredFrame {
                    joints: state.joints.clone(),
                    gripper: state.gripper,
                    pose: state.pose,
                    points: pf.points.clone(),
                    label: *label,
                })
                .collect(),
        }
    }

    pub fn frame_tuple(&self, t: usize) -> (RobotStateFrame, PointFrame, Label) {
        let f = &self.frames[t];
        (
            RobotStateFrame {
                joints: f.joints.clone(),
                gripper: f.gripper,
                pose: f.pose,
            },
            PointFrame {
                points: f.points.clone(),
            },
            f.label,
        )
    }
}

/// Dataset manifest: dimensions, task set and (after training) the
/// normalization statistics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(rename = "T")]
    pub window: usize,
    #[serde(rename = "N")]
    pub points: usize,
    #[serde(rename = "J")]
    pub joints: usize,
    pub tasks: Vec<String>,
    pub norm_stats: Option<NormStats>,
}

pub fn write_episodes(path: &Path, episodes: &[StoredEpisode]) -> Result<()> {
    let mut buf = Vec::new();
    for ep in episodes {
        let line = crate::fileio::to_json_precise(ep)?;
        buf.write_all(line.as_bytes())?;
        buf.write_all(b"\n")?;
    }
    crate::fileio::write_atomic(path, std::str::from_utf8(&buf).expect("utf8"))?;
    Ok(())
}

pub fn read_episodes(path: &Path) -> Result<Vec<StoredEpisode>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// One window starting at `start`. A window is anomalous when it overlaps
/// `[t_anomaly, inf)`, i.e. when any of its frames is anomalous.
pub fn window_at(ep: &StoredEpisode, window: usize, start: usize) -> Result<Window> {
    let len = ep.frames.len();
    if len < window || start + window > len {
        return Err(Error::EpisodeTooShort { len, window });
    }
    let n_points = ep.frames[0].points.len();
    let state_dim = ep.frames[0].joints.len() + 1 + 7;
    let mut x = Array3::<f64>::zeros((window, n_points, 2));
    let mut s = Array2::<f64>::zeros((window, state_dim));
    let mut label = Label::Normal;
    for t in 0..window {
        let f = &ep.frames[start + t];
        for (n, p) in f.points.iter().enumerate() {
            x[[t, n, 0]] = p[0];
            x[[t, n, 1]] = p[1];
        }
        let row = {
            let mut v = f.joints.clone();
            v.push(f.gripper);
            v.extend_from_slice(&f.pose);
            v
        };
        for (i, v) in row.into_iter().enumerate() {
            s[[t, i]] = v;
        }
        if f.label == Label::Anomalous {
            label = Label::Anomalous;
        }
    }
    Ok(Window {
        x,
        s,
        task_id: ep.task_id.clone(),
        label,
        source: (ep.episode_id.clone(), start),
    })
}

/// Slice an episode into sliding windows (`floor((len - T)/stride) + 1` of
/// them, starting at multiples of the stride).
pub fn windows_from_episode(
    ep: &StoredEpisode,
    window: usize,
    stride: usize,
) -> Result<Vec<Window>> {
    let len = ep.frames.len();
    if len < window {
        return Err(Error::EpisodeTooShort { len, window });
    }
    assert!(stride >= 1, "stride must be >= 1");
    let count = (len - window) / stride + 1;
    let mut out = Vec::with_capacity(count);
    for w in 0..count {
        out.push(window_at(ep, window, w * stride)?);
    }
    Ok(out)
}

/// Bucket scores into `bins` equal-width bins over their value range and
/// weight each window inversely to its bin's population, so that resampling
/// flattens the score histogram. Empty bins contribute nothing.
pub fn compute_balanced_weights(per_window_scores: &[f64], bins: usize) -> Result<SampleWeights> {
    if per_window_scores.is_empty() {
        return Err(Error::InvalidDimensions("need at least one score".into()));
    }
    if bins < 1 {
        return Err(Error::InvalidDimensions("need at least one bin".into()));
    }
    let lo = per_window_scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = per_window_scores
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let n = per_window_scores.len();
    let assign = |s: f64| -> usize {
        if hi <= lo {
            0
        } else {
            (((s - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1)
        }
    };
    let mut counts = vec![0usize; bins];
    for &s in per_window_scores {
        counts[assign(s)] += 1;
    }
    let mut weights: Vec<f64> = per_window_scores
        .iter()
        .map(|&s| 1.0 / (bins as f64 * counts[assign(s)] as f64))
        .collect();
    let total: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= total;
    }
    debug_assert!(weights.len() == n);
    Ok(SampleWeights { weights })
}

/// `count` i.i.d. index draws with replacement, probabilities equal to the
/// weights. Deterministic per seed.
pub fn weighted_sample(weights: &SampleWeights, count: usize, seed: u64) -> Vec<usize> {
    assert!(count >= 1);
    let mut cdf = Vec::with_capacity(weights.weights.len());
    let mut acc = 0.0;
    for w in &weights.weights {
        acc += w;
        cdf.push(acc);
    }
    let mut rng = rng_from(seed, "weighted-sample");
    (0..count)
        .map(|_| {
            let u: f64 = rng.gen_range(0.0..1.0) * acc;
            match cdf.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
                Ok(i) => i,
                Err(i) => i.min(cdf.len() - 1),
            }
        })
        .collect()
}
