//! Threshold-free evaluation: ROC AUC (Mann-Whitney with tie correction),
//! step-wise average precision, and frame-level benchmark aggregation
//! across anomaly kinds.

use crate::dataset::{windows_from_episode, StoredEpisode};
use crate::error::{Error, Result};
use crate::flow::{anomaly_scores_batched, FlowModel, ScoreOptions};
use crate::monitor::ThresholdProfile;
use crate::scene_sim::{AnomalyKind, Label};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScoredFrame {
    pub score: f64,
    /// 0 = normal, 1 = anomalous.
    pub label: u8,
    pub episode_id: String,
    pub frame: usize,
}

/// Probability that a uniformly random positive outscores a random
/// negative, ties counted half (Mann-Whitney / rank formulation).
pub fn auc(scored: &[ScoredFrame]) -> Result<f64> {
    let n_pos = scored.iter().filter(|s| s.label == 1).count();
    let n_neg = scored.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[a].score.partial_cmp(&scored[b].score).unwrap());
    // Average ranks over tie groups (1-based ranks).
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scored[order[j + 1]].score == scored[order[i]].score {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if scored[idx].label == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Step-wise average precision over the descending-score ranking. Ties are
/// broken by stable input order; callers surface a warning when tied scores
/// cross class boundaries (see [`has_cross_class_ties`]).
pub fn average_precision(scored: &[ScoredFrame]) -> Result<f64> {
    let n_pos = scored.iter().filter(|s| s.label == 1).count();
    if n_pos == 0 {
        return Err(Error::NoPositives);
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].score.partial_cmp(&scored[a].score).unwrap());
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (rank0, &idx) in order.iter().enumerate() {
        if scored[idx].label == 1 {
            hits += 1;
            ap += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(ap / n_pos as f64)
}

/// True when a positive and a negative share a score, making the AP ranking
/// order-dependent.
pub fn has_cross_class_ties(scored: &[ScoredFrame]) -> bool {
    let mut by_score: BTreeMap<u64, (bool, bool)> = BTreeMap::new();
    for s in scored {
        let e = by_score.entry(s.score.to_bits()).or_insert((false, false));
        if s.label == 1 {
            e.0 = true;
        } else {
            e.1 = true;
        }
    }
    by_score.values().any(|&(p, n)| p && n)
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct MetricPair {
    pub auc: f64,
    pub ap: f64,
    pub frames: usize,
    pub positives: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CurvePoint {
    pub frame: usize,
    pub score: f64,
    pub upper: f64,
    pub label: u8,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchReport {
    pub per_kind: BTreeMap<String, MetricPair>,
    pub macro_auc: f64,
    pub macro_ap: f64,
    pub per_task: BTreeMap<String, MetricPair>,
    pub warnings: Vec<String>,
}

pub struct BenchOutput {
    pub report: BenchReport,
    /// Per-episode score curves for plotting.
    pub curves: Vec<(String, Vec<CurvePoint>)>,
    pub scored_frames: Vec<(AnomalyKind, String, ScoredFrame)>,
}

/// Score every frame of every episode (window ending at the frame, warm-up
/// excluded), group by anomaly kind, and compute AUC/AP per kind plus the
/// macro average and a per-task breakdown.
pub fn evaluate_benchmark(
    model: &FlowModel,
    profiles: &BTreeMap<String, ThresholdProfile>,
    episodes: &[StoredEpisode],
    opts: ScoreOptions,
) -> Result<BenchOutput> {
    let t_len = model.config.window;
    let mut warnings = Vec::new();
    let mut curves = Vec::new();
    let mut all: Vec<(AnomalyKind, String, ScoredFrame)> = Vec::new();
    for ep in episodes {
        if ep.frames.len() < t_len {
            warnings.push(format!(
                "episode {} shorter than the window; skipped",
                ep.episode_id
            ));
            continue;
        }
        let windows = windows_from_episode(ep, t_len, 1)?;
        let refs: Vec<&_> = windows.iter().collect();
        let scores = anomaly_scores_batched(model, &refs, opts, 64)?;
        let upper = profiles
            .get(&ep.task_id)
            .map(|p| p.upper)
            .unwrap_or(f64::INFINITY);
        let mut curve = Vec::with_capacity(windows.len());
        for (w, score) in windows.iter().zip(scores.iter()) {
            // The window starting at `start` ends at frame start + T - 1 and
            // carries that frame's label.
            let frame = w.source.1 + t_len - 1;
            let label = match ep.frames[frame].label {
                Label::Anomalous => 1u8,
                Label::Normal => 0u8,
            };
            let sf = ScoredFrame {
                score: *score,
                label,
                episode_id: ep.episode_id.clone(),
                frame,
            };
            curve.push(CurvePoint {
                frame,
                score: *score,
                upper,
                label,
            });
            all.push((ep.anomaly_kind, ep.task_id.clone(), sf));
        }
        curves.push((ep.episode_id.clone(), curve));
    }

    // Frames from nominal episodes (if present in the eval set) join every
    // kind's pool as shared negatives; short episodes may otherwise leave a
    // kind with no scorable pre-anomaly frames.
    let nominal: Vec<ScoredFrame> = all
        .iter()
        .filter(|(k, _, _)| *k == AnomalyKind::None)
        .map(|(_, _, s)| s.clone())
        .collect();
    let mut per_kind = BTreeMap::new();
    for kind in [
        AnomalyKind::GripperOpen,
        AnomalyKind::GripperSlippage,
        AnomalyKind::SpatialMisalignment,
    ] {
        let mut frames: Vec<ScoredFrame> = all
            .iter()
            .filter(|(k, _, _)| *k == kind)
            .map(|(_, _, s)| s.clone())
            .collect();
        if frames.is_empty() {
            warnings.push(format!("no episodes of kind {}", kind.as_str()));
            continue;
        }
        frames.extend(nominal.iter().cloned());
        if has_cross_class_ties(&frames) {
            warnings.push(format!(
                "tied scores across classes in {}; AP uses stable input order",
                kind.as_str()
            ));
        }
        match (auc(&frames), average_precision(&frames)) {
            (Ok(a), Ok(p)) => {
                per_kind.insert(
                    kind.as_str().to_string(),
                    MetricPair {
                        auc: a,
                        ap: p,
                        frames: frames.len(),
                        positives: frames.iter().filter(|f| f.label == 1).count(),
                    },
                );
            }
            _ => warnings.push(format!(
                "kind {} lacks both classes; metrics skipped",
                kind.as_str()
            )),
        }
    }
    let macro_auc = if per_kind.is_empty() {
        0.0
    } else {
        per_kind.values().map(|m| m.auc).sum::<f64>() / per_kind.len() as f64
    };
    let macro_ap = if per_kind.is_empty() {
        0.0
    } else {
        per_kind.values().map(|m| m.ap).sum::<f64>() / per_kind.len() as f64
    };

    let mut per_task = BTreeMap::new();
    let mut tasks: Vec<String> = all.iter().map(|(_, t, _)| t.clone()).collect();
    tasks.sort();
    tasks.dedup();
    for task in tasks {
        let frames: Vec<ScoredFrame> = all
            .iter()
            .filter(|(_, t, _)| *t == task)
            .map(|(_, _, s)| s.clone())
            .collect();
        if let (Ok(a), Ok(p)) = (auc(&frames), average_precision(&frames)) {
            per_task.insert(
                task,
                MetricPair {
                    auc: a,
                    ap: p,
                    frames: frames.len(),
                    positives: frames.iter().filter(|f| f.label == 1).count(),
                },
            );
        }
    }

    Ok(BenchOutput {
        report: BenchReport {
            per_kind,
            macro_auc,
            macro_ap,
            per_task,
            warnings,
        },
        curves,
        scored_frames: all,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sf(scores_labels: &[(f64, u8)]) -> Vec<ScoredFrame> {
        scores_labels
            .iter()
            .enumerate()
            .map(|(i, &(score, label))| ScoredFrame {
                score,
                label,
                episode_id: "e".into(),
                frame: i,
            })
            .collect()
    }

    /// Brute-force pairwise AUC oracle: ties count half.
    fn auc_oracle(scored: &[ScoredFrame]) -> f64 {
        let pos: Vec<f64> = scored.iter().filter(|s| s.label == 1).map(|s| s.score).collect();
        let neg: Vec<f64> = scored.iter().filter(|s| s.label == 0).map(|s| s.score).collect();
        let mut total = 0.0;
        for p in &pos {
            for n in &neg {
                total += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        total / (pos.len() * neg.len()) as f64
    }

    /// Rank-by-rank AP oracle.
    fn ap_oracle(scored: &[ScoredFrame]) -> f64 {
        let mut order: Vec<usize> = (0..scored.len()).collect();
        order.sort_by(|&a, &b| scored[b].score.partial_cmp(&scored[a].score).unwrap());
        let n_pos = scored.iter().filter(|s| s.label == 1).count();
        let mut hits = 0;
        let mut acc = 0.0;
        for (i, &idx) in order.iter().enumerate() {
            if scored[idx].label == 1 {
                hits += 1;
                acc += hits as f64 / (i + 1) as f64;
            }
        }
        acc / n_pos as f64
    }

    #[test]
    fn worked_auc_example() {
        let s = sf(&[(0.1, 0), (0.4, 0), (0.35, 1), (0.8, 1)]);
        assert!((auc(&s).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn worked_ap_example() {
        let s = sf(&[(0.8, 1), (0.4, 0), (0.35, 1), (0.1, 0)]);
        assert!((average_precision(&s).unwrap() - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_separation_and_degenerate_rankings() {
        let s = sf(&[(0.9, 1), (0.8, 1), (0.2, 0), (0.1, 0)]);
        assert!((auc(&s).unwrap() - 1.0).abs() < 1e-12);
        assert!((average_precision(&s).unwrap() - 1.0).abs() < 1e-12);
        // Single positive ranked last of n: AP = 1/n.
        let s = sf(&[(0.9, 0), (0.8, 0), (0.7, 0), (0.1, 1)]);
        assert!((average_precision(&s).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn single_class_is_rejected() {
        let s = sf(&[(0.9, 1), (0.8, 1)]);
        assert!(matches!(auc(&s), Err(Error::SingleClass)));
        let s = sf(&[(0.9, 0), (0.8, 0)]);
        assert!(matches!(average_precision(&s), Err(Error::NoPositives)));
    }

    #[test]
    fn matches_brute_force_on_all_small_labelings() {
        // Every labeling of n <= 8 items over two score vectors (one with
        // ties), compared exactly against the pairwise/rank oracles.
        let score_sets: Vec<Vec<f64>> = vec![
            vec![0.1, 0.9, 0.4, 0.35, 0.8, 0.2, 0.65, 0.5],
            vec![0.3, 0.3, 0.7, 0.1, 0.7, 0.3, 0.9, 0.1],
        ];
        for scores in &score_sets {
            for n in 2..=8usize {
                for mask in 1..(1u32 << n) - 1 {
                    let sl: Vec<(f64, u8)> = (0..n)
                        .map(|i| (scores[i], (mask >> i & 1) as u8))
                        .collect();
                    let s = sf(&sl);
                    let a = auc(&s).unwrap();
                    let ao = auc_oracle(&s);
                    assert!((a - ao).abs() < 1e-12, "auc {a} vs oracle {ao} mask {mask:#b}");
                    let p = average_precision(&s).unwrap();
                    let po = ap_oracle(&s);
                    assert!((p - po).abs() < 1e-12, "ap {p} vs {po}");
                }
            }
        }
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let s = sf(&[(0.1, 0), (0.5, 1), (0.3, 0), (0.9, 1), (0.2, 1)]);
        let a = auc(&s).unwrap();
        let transformed: Vec<(f64, u8)> = s
            .iter()
            .map(|f| ((f.score * 3.0).exp() + 1.0, f.label))
            .collect();
        let b = auc(&sf(&transformed)).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn auc_complement_under_score_negation() {
        let s = sf(&[(0.1, 0), (0.5, 1), (0.3, 0), (0.9, 1), (0.2, 1)]);
        let a = auc(&s).unwrap();
        let negated: Vec<(f64, u8)> = s.iter().map(|f| (-f.score, f.label)).collect();
        let b = auc(&sf(&negated)).unwrap();
        assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shuffled_labels_average_half() {
        use rand::seq::SliceRandom;
        let mut rng = crate::util::rng_from(3, "auc-null");
        let mut total = 0.0;
        let trials = 400;
        for _ in 0..trials {
            let scores: Vec<f64> = (0..40).map(|i| i as f64 * 0.025).collect();
            let mut labels: Vec<u8> = (0..40).map(|i| (i % 2) as u8).collect();
            labels.shuffle(&mut rng);
            let sl: Vec<(f64, u8)> = scores.into_iter().zip(labels).collect();
            total += auc(&sf(&sl)).unwrap();
        }
        let mean = total / trials as f64;
        assert!((mean - 0.5).abs() < 0.02, "null AUC mean {mean}");
    }

    #[test]
    fn ap_lower_bound_is_prevalence() {
        let s = sf(&[(0.5, 1), (0.5, 0), (0.5, 1), (0.5, 0)]);
        let ap = average_precision(&s).unwrap();
        assert!(ap >= 0.5 - 1e-12 && ap <= 1.0);
        assert!(has_cross_class_ties(&s));
    }
}
