//! Per-task threshold calibration with a conformal quantile, streaming
//! verdicts over a frame ring buffer, and the rollback/replan event
//! automaton.

use crate::dataset::Window;
use crate::error::{Error, Result};
use crate::flow::{anomaly_scores_batched, FlowModel, ScoreOptions};
use crate::scene_sim::{Label, PointFrame, RobotStateFrame};
use crate::util::rng_from;
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ThresholdProfile {
    pub task_id: String,
    /// Mean nominal score over the first calibration split.
    pub mu: f64,
    /// Score deviations from `mu` over the second split.
    pub deviations: Vec<f64>,
    pub alpha: f64,
    /// `mu + Q_{1-alpha}(deviations)`.
    pub upper: f64,
}

impl ThresholdProfile {
    /// Recompute the threshold from the stored fields (invariant check and
    /// load-time validation).
    pub fn recompute_upper(&self) -> f64 {
        conformal_upper(self.mu, &self.deviations, self.alpha)
    }
}

/// The `ceil((1-alpha)(n+1))`-th order statistic of the deviations added to
/// the mean. Using the order-statistic convention keeps the finite-sample
/// false-positive guarantee one-sided.
pub fn conformal_upper(mu: f64, deviations: &[f64], alpha: f64) -> f64 {
    let n = deviations.len();
    let mut sorted = deviations.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((1.0 - alpha) * (n as f64 + 1.0)).ceil() as usize;
    let idx = rank.clamp(1, n) - 1;
    mu + sorted[idx]
}

/// Calibrate a per-task threshold from nominal scores alone.
pub fn calibrate_from_scores(
    task_id: &str,
    scores: &[f64],
    alpha: f64,
    split_seed: u64,
) -> Result<ThresholdProfile> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::InvalidConfig(format!("alpha {alpha} outside (0,1)")));
    }
    let need = 2 * (1.0 / alpha).ceil() as usize;
    if scores.len() < need {
        return Err(Error::InsufficientCalibrationData {
            have: scores.len(),
            need,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let mut rng = rng_from(split_seed, &format!("calibrate-{task_id}"));
    order.shuffle(&mut rng);
    let half = scores.len() / 2;
    let s1: Vec<f64> = order[..half].iter().map(|&i| scores[i]).collect();
    let s2: Vec<f64> = order[half..].iter().map(|&i| scores[i]).collect();
    let mu = s1.iter().sum::<f64>() / s1.len() as f64;
    let deviations: Vec<f64> = s2.iter().map(|s| s - mu).collect();
    let upper = conformal_upper(mu, &deviations, alpha);
    Ok(ThresholdProfile {
        task_id: task_id.to_string(),
        mu,
        deviations,
        alpha,
        upper,
    })
}

/// Score nominal windows of one task and calibrate its threshold.
pub fn calibrate(
    model: &FlowModel,
    nominal_windows: &[Window],
    task_id: &str,
    alpha: f64,
    split_seed: u64,
) -> Result<ThresholdProfile> {
    if nominal_windows.iter().any(|w| w.label != Label::Normal) {
        return Err(Error::MixedLabels);
    }
    let refs: Vec<&Window> = nominal_windows.iter().collect();
    let scores = anomaly_scores_batched(model, &refs, ScoreOptions::default(), 64)?;
    calibrate_from_scores(task_id, &scores, alpha, split_seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictState {
    Normal,
    Anomalous,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MonitorEvent {
    None,
    RollbackRequested,
    ReplanRequested,
    Resume,
    FrameRejected,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Verdict {
    pub frame: usize,
    pub score: f64,
    pub upper: f64,
    pub state: VerdictState,
    pub event: MonitorEvent,
    pub latency_ms: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Consecutive anomalous frames before escalating to replanning.
    pub persist_k: usize,
    /// Resume only once the score falls below `upper - hysteresis`.
    pub hysteresis: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            persist_k: 5,
            hysteresis: 0.0,
        }
    }
}

/// The anomaly-handling automaton: rollback on entering the anomalous
/// state, escalate to replanning after `persist_k` consecutive anomalous
/// frames, resume when the score drops back under the threshold.
#[derive(Clone, Debug)]
pub struct PolicyAutomaton {
    policy: PolicyConfig,
    state: VerdictState,
    consecutive: usize,
    escalated: bool,
}

impl PolicyAutomaton {
    pub fn new(policy: PolicyConfig) -> Self {
        PolicyAutomaton {
            policy,
            state: VerdictState::Normal,
            consecutive: 0,
            escalated: false,
        }
    }

    pub fn step(&mut self, profile: &ThresholdProfile, score: f64) -> (VerdictState, MonitorEvent) {
        let anomalous = score > profile.upper;
        match (self.state, anomalous) {
            (VerdictState::Normal, true) => {
                self.state = VerdictState::Anomalous;
                self.consecutive = 1;
                self.escalated = false;
                let event = if self.policy.persist_k <= 1 {
                    self.escalated = true;
                    MonitorEvent::ReplanRequested
                } else {
                    MonitorEvent::RollbackRequested
                };
                (self.state, event)
            }
            (VerdictState::Anomalous, true) => {
                self.consecutive += 1;
                if !self.escalated && self.consecutive >= self.policy.persist_k {
                    self.escalated = true;
                    (self.state, MonitorEvent::ReplanRequested)
                } else {
                    (self.state, MonitorEvent::None)
                }
            }
            (VerdictState::Anomalous, false) => {
                if score <= profile.upper - self.policy.hysteresis {
                    self.state = VerdictState::Normal;
                    self.consecutive = 0;
                    self.escalated = false;
                    (self.state, MonitorEvent::Resume)
                } else {
                    // Inside the hysteresis band: still anomalous.
                    self.consecutive += 1;
                    (self.state, MonitorEvent::None)
                }
            }
            (VerdictState::Normal, false) => {
                self.consecutive = 0;
                (self.state, MonitorEvent::None)
            }
        }
    }
}

/// Pointwise verdict without automaton state: anomalous iff the score
/// strictly exceeds the threshold.
pub fn judge(profile: &ThresholdProfile, score: f64, frame: usize) -> Verdict {
    let state = if score > profile.upper {
        VerdictState::Anomalous
    } else {
        VerdictState::Normal
    };
    Verdict {
        frame,
        score,
        upper: profile.upper,
        state,
        event: MonitorEvent::None,
        latency_ms: 0.0,
    }
}

fn frame_is_valid(model: &FlowModel, state: &RobotStateFrame, points: &PointFrame) -> bool {
    state.validate().is_ok()
        && state.joints.len() == model.config.joints
        && points.points.len() == model.config.n_points
        && points
            .points
            .iter()
            .all(|p| p.iter().all(|v| v.is_finite()))
}

/// Run the streaming monitor over a frame sequence. A warm-up of `T` frames
/// precedes the first verdict; malformed frames emit a rejection event and
/// leave the ring buffer unchanged.
pub fn run_monitor(
    model: &FlowModel,
    profile: &ThresholdProfile,
    frames: impl IntoIterator<Item = (RobotStateFrame, PointFrame)>,
    policy: PolicyConfig,
) -> Result<Vec<Verdict>> {
    let t_len = model.config.window;
    let n = model.config.n_points;
    let sd = model.config.state_dim();
    let mut ring: std::collections::VecDeque<(RobotStateFrame, PointFrame)> =
        std::collections::VecDeque::with_capacity(t_len);
    let mut automaton = PolicyAutomaton::new(policy);
    let mut verdicts = Vec::new();
    for (idx, (state, points)) in frames.into_iter().enumerate() {
        let started = Instant::now();
        if !frame_is_valid(model, &state, &points) {
            verdicts.push(Verdict {
                frame: idx,
                score: f64::NAN,
                upper: profile.upper,
                state: automaton.state,
                event: MonitorEvent::FrameRejected,
                latency_ms: started.elapsed().as_secs_f64() * 1000.0,
            });
            continue;
        }
        if ring.len() == t_len {
            ring.pop_front();
        }
        ring.push_back((state, points));
        if ring.len() < t_len {
            continue; // warm-up only delays output
        }
        let mut x = Array3::<f64>::zeros((t_len, n, 2));
        let mut s = Array2::<f64>::zeros((t_len, sd));
        for (t, (st, pf)) in ring.iter().enumerate() {
            for (p, pt) in pf.points.iter().enumerate() {
                x[[t, p, 0]] = pt[0];
                x[[t, p, 1]] = pt[1];
            }
            for (d, v) in st.to_vec().into_iter().enumerate() {
                s[[t, d]] = v;
            }
        }
        let score = crate::flow::anomaly_score(model, &x, &s, &profile.task_id)?;
        let (state, event) = automaton.step(profile, score);
        verdicts.push(Verdict {
            frame: idx,
            score,
            upper: profile.upper,
            state,
            event,
            latency_ms: started.elapsed().as_secs_f64() * 1000.0,
        });
    }
    Ok(verdicts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn profile_with(mu: f64, deviations: Vec<f64>, alpha: f64) -> ThresholdProfile {
        let upper = conformal_upper(mu, &deviations, alpha);
        ThresholdProfile {
            task_id: "t".into(),
            mu,
            deviations,
            alpha,
            upper,
        }
    }

    #[test]
    fn worked_quantile_example() {
        // mu = -2.0, deviations {0.0, 0.1, ..., 1.9}, alpha = 0.05:
        // rank ceil(0.95 * 21) = 20 -> Q = 1.9 -> upper = -0.1.
        let deviations: Vec<f64> = (0..20).map(|i| i as f64 * 0.1).collect();
        let p = profile_with(-2.0, deviations, 0.05);
        assert!((p.upper - (-0.1)).abs() < 1e-12, "upper {}", p.upper);
    }

    #[test]
    fn identical_scores_give_upper_equal_mu() {
        let scores = vec![3.25; 50];
        let p = calibrate_from_scores("t", &scores, 0.05, 0).unwrap();
        assert!((p.mu - 3.25).abs() < 1e-12);
        assert!(p.deviations.iter().all(|d| d.abs() < 1e-12));
        assert!((p.upper - 3.25).abs() < 1e-12);
    }

    #[test]
    fn upper_is_recomputable_from_stored_fields() {
        let mut rng = rng_from(1, "recompute");
        let scores: Vec<f64> = (0..100).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
        let p = calibrate_from_scores("t", &scores, 0.1, 7).unwrap();
        assert!((p.recompute_upper() - p.upper).abs() < 1e-12);
    }

    #[test]
    fn insufficient_data_is_rejected() {
        let scores = vec![0.0; 10];
        assert!(matches!(
            calibrate_from_scores("t", &scores, 0.05, 0),
            Err(Error::InsufficientCalibrationData { need: 40, .. })
        ));
    }

    #[test]
    fn increasing_alpha_weakly_decreases_upper() {
        let mut rng = rng_from(2, "alpha-mono");
        let scores: Vec<f64> = (0..200).map(|_| rng.gen::<f64>()).collect();
        let mut last = f64::INFINITY;
        for alpha in [0.01, 0.05, 0.1, 0.2, 0.4] {
            let p = calibrate_from_scores("t", &scores, alpha, 3).unwrap();
            assert!(p.upper <= last + 1e-12, "upper must not increase with alpha");
            last = p.upper;
        }
    }

    #[test]
    fn conformal_false_positive_rate_bound() {
        // Monte Carlo over 200 resamples from a fixed nominal-score law.
        let alpha = 0.05;
        let n_test = 200usize;
        let n_cal = 120usize;
        let mut total_fpr = 0.0;
        for rep in 0..200u64 {
            let mut rng = rng_from(rep, "fpr-sim");
            let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 {
                // Skewed mixture: bulk plus occasional heavier scores.
                let u: f64 = rng.gen();
                if u < 0.9 {
                    rng.gen::<f64>()
                } else {
                    1.0 + 2.0 * rng.gen::<f64>()
                }
            };
            let cal: Vec<f64> = (0..n_cal).map(|_| draw(&mut rng)).collect();
            let p = calibrate_from_scores("t", &cal, alpha, rep).unwrap();
            let fp = (0..n_test)
                .filter(|_| draw(&mut rng) > p.upper)
                .count();
            total_fpr += fp as f64 / n_test as f64;
        }
        let mean_fpr = total_fpr / 200.0;
        let bound = alpha + 2.0 / (n_test as f64).sqrt();
        assert!(mean_fpr <= bound, "mean FPR {mean_fpr} exceeds {bound}");
    }

    #[test]
    fn judge_uses_strict_inequality() {
        let p = profile_with(0.0, vec![0.5, 1.0, 1.5, 2.0], 0.2);
        let at = judge(&p, p.upper, 0);
        assert_eq!(at.state, VerdictState::Normal);
        let above = judge(&p, p.upper + 1.0, 1);
        assert_eq!(above.state, VerdictState::Anomalous);
    }

    #[test]
    fn alternating_scores_match_pointwise_rule() {
        let p = profile_with(0.0, vec![0.1; 30], 0.1);
        let mut auto = PolicyAutomaton::new(PolicyConfig {
            persist_k: 5,
            hysteresis: 0.0,
        });
        for i in 0..10 {
            let score = if i % 2 == 0 { p.upper + 0.5 } else { p.upper - 0.5 };
            let (state, _) = auto.step(&p, score);
            let expect = judge(&p, score, i).state;
            assert_eq!(state, expect);
        }
    }

    #[test]
    fn escalation_fires_exactly_once() {
        let p = profile_with(0.0, vec![0.1; 30], 0.1);
        let mut auto = PolicyAutomaton::new(PolicyConfig {
            persist_k: 5,
            hysteresis: 0.0,
        });
        let mut events = Vec::new();
        for _ in 0..6 {
            let (_, e) = auto.step(&p, p.upper + 1.0);
            events.push(e);
        }
        let rollbacks = events.iter().filter(|e| **e == MonitorEvent::RollbackRequested).count();
        let replans = events.iter().filter(|e| **e == MonitorEvent::ReplanRequested).count();
        assert_eq!(rollbacks, 1);
        assert_eq!(replans, 1);
        assert_eq!(events[0], MonitorEvent::RollbackRequested);
        assert_eq!(events[4], MonitorEvent::ReplanRequested);
        // Recovery emits resume, and a later excursion rolls back again.
        let (_, e) = auto.step(&p, p.upper - 1.0);
        assert_eq!(e, MonitorEvent::Resume);
        let (_, e) = auto.step(&p, p.upper + 1.0);
        assert_eq!(e, MonitorEvent::RollbackRequested);
    }

    #[test]
    fn event_sequence_is_deterministic_over_enumerated_histories() {
        // Model-check: for every 8-frame boolean history, the event stream
        // is a pure function of the history and persist_k.
        let p = profile_with(0.0, vec![0.1; 30], 0.1);
        for persist_k in [1usize, 2, 5] {
            for mask in 0..256u32 {
                let run = || -> Vec<MonitorEvent> {
                    let mut auto = PolicyAutomaton::new(PolicyConfig {
                        persist_k,
                        hysteresis: 0.0,
                    });
                    (0..8)
                        .map(|i| {
                            let score = if mask >> i & 1 == 1 {
                                p.upper + 1.0
                            } else {
                                p.upper - 1.0
                            };
                            auto.step(&p, score).1
                        })
                        .collect()
                };
                let a = run();
                let b = run();
                assert_eq!(a, b);
                // Reference automaton: replay with simple counters.
                let mut state = false;
                let mut consec = 0usize;
                let mut escalated = false;
                for (i, got) in a.iter().enumerate() {
                    let anom = mask >> i & 1 == 1;
                    let want = if anom && !state {
                        state = true;
                        consec = 1;
                        escalated = persist_k <= 1;
                        if escalated {
                            MonitorEvent::ReplanRequested
                        } else {
                            MonitorEvent::RollbackRequested
                        }
                    } else if anom {
                        consec += 1;
                        if !escalated && consec >= persist_k {
                            escalated = true;
                            MonitorEvent::ReplanRequested
                        } else {
                            MonitorEvent::None
                        }
                    } else if state {
                        state = false;
                        consec = 0;
                        escalated = false;
                        MonitorEvent::Resume
                    } else {
                        MonitorEvent::None
                    };
                    assert_eq!(*got, want, "persist_k {persist_k} mask {mask:#b} frame {i}");
                }
            }
        }
    }

    #[test]
    fn hysteresis_delays_resume() {
        let p = profile_with(0.0, vec![0.1; 30], 0.1);
        let mut auto = PolicyAutomaton::new(PolicyConfig {
            persist_k: 3,
            hysteresis: 0.2,
        });
        auto.step(&p, p.upper + 1.0);
        // Score drops below upper but inside the hysteresis band.
        let (state, e) = auto.step(&p, p.upper - 0.1);
        assert_eq!(state, VerdictState::Anomalous);
        assert_eq!(e, MonitorEvent::None);
        let (state, e) = auto.step(&p, p.upper - 0.3);
        assert_eq!(state, VerdictState::Normal);
        assert_eq!(e, MonitorEvent::Resume);
    }

    use crate::util::rng_from;
}
