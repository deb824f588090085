//! Two-stage maximum-likelihood training: uniform sampling first, then a
//! score-balanced sampler for the remaining epochs, with Adam, gradient
//! clipping, validation by held-out episodes, and a finite-difference
//! gradient checker for the full model.

use crate::autodiff::Tape;
use crate::dataset::{
    compute_balanced_weights, weighted_sample, windows_from_episode, NormStats, SampleWeights,
    StoredEpisode, Window,
};
use crate::error::{Error, Result};
use crate::flow::{actnorm_init, anomaly_scores_batched, batch_from_windows, forward_batch, FlowModel, ScoreOptions};
use crate::params::{Adam, TapeBind};
use crate::scene_sim::Label;
use crate::util::{hash_label, rng_from};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Epoch at which scoring runs and the balanced sampler takes over.
    pub next_stage_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Histogram bins for the balancing weights.
    pub bins: usize,
    /// Stride when slicing training windows from episodes. Evaluation and
    /// calibration always use stride 1; training at stride 2 halves the
    /// near-duplicate windows.
    pub train_stride: usize,
    /// Fraction of episodes held out for validation.
    pub validation_fraction: f64,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    /// Recompute sampler weights every this many epochs after the handoff
    /// (None matches the two-stage procedure exactly: computed once).
    pub weight_refresh: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            next_stage_epoch: 30,
            batch_size: 64,
            learning_rate: 1e-3,
            grad_clip: 5.0,
            seed: 0,
            bins: 10,
            train_stride: 3,
            validation_fraction: 0.1,
            checkpoint_every: 10,
            weight_refresh: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.next_stage_epoch < 1 || self.next_stage_epoch > self.epochs {
            return Err(Error::InvalidConfig(format!(
                "need 1 <= next_stage_epoch ({}) <= epochs ({})",
                self.next_stage_epoch, self.epochs
            )));
        }
        if self.batch_size < 1
            || self.bins < 1
            || self.train_stride < 1
            || !(self.learning_rate > 0.0)
            || !(0.0..0.9).contains(&self.validation_fraction)
        {
            return Err(Error::InvalidConfig("bad training hyperparameters".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub per_epoch_nll: Vec<f64>,
    pub sampler_stage_epoch: usize,
    pub final_validation_nll: f64,
    pub wall_seconds: f64,
    pub train_windows: usize,
    pub validation_windows: usize,
    pub warnings: Vec<String>,
    /// (epoch, validation NLL) at each validation pass.
    pub validation_history: Vec<(usize, f64)>,
}

fn mean_nll(model: &FlowModel, windows: &[Window]) -> Result<f64> {
    if windows.is_empty() {
        return Ok(f64::NAN);
    }
    let refs: Vec<&Window> = windows.iter().collect();
    let scores = anomaly_scores_batched(model, &refs, ScoreOptions::default(), 64)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Train on nominal windows only. Epoch 1 starts with data-dependent
/// ActNorm initialization from the first batch; the sampler switches from
/// uniform to score-balanced at `next_stage_epoch`.
pub fn train(
    model: &mut FlowModel,
    episodes: &[StoredEpisode],
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(TrainReport, String)> {
    cfg.validate()?;
    let start = Instant::now();
    let mut warnings = Vec::new();

    // Validation split by episode, not by window, to avoid leakage.
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    let mut rng = rng_from(cfg.seed, "train-split");
    order.shuffle(&mut rng);
    let n_val = ((episodes.len() as f64) * cfg.validation_fraction).round() as usize;
    let (val_idx, train_idx) = order.split_at(n_val);

    // Strided windows, always including the final-start window so the tail
    // frames of every episode are seen in training.
    let strided = |ep: &StoredEpisode| -> Result<Vec<Window>> {
        let t_len = model.config.window;
        let mut ws = windows_from_episode(ep, t_len, cfg.train_stride)?;
        let last_start = ep.frames.len() - t_len;
        if last_start % cfg.train_stride != 0 {
            ws.push(crate::dataset::window_at(ep, t_len, last_start)?);
        }
        Ok(ws)
    };
    let mut train_windows: Vec<Window> = Vec::new();
    for &i in train_idx {
        train_windows.extend(strided(&episodes[i])?);
    }
    let mut val_windows: Vec<Window> = Vec::new();
    for &i in val_idx {
        val_windows.extend(strided(&episodes[i])?);
    }
    if train_windows.iter().chain(val_windows.iter()).any(|w| w.label == Label::Anomalous) {
        return Err(Error::AnomalousDataInTraining);
    }
    if train_windows.len() < cfg.batch_size {
        return Err(Error::InvalidConfig(format!(
            "only {} training windows for batch size {}",
            train_windows.len(),
            cfg.batch_size
        )));
    }

    // Robot-state normalization from the training split.
    model.norm_stats = NormStats::fit(&train_windows);

    let mut opt = Adam::new(&model.store, cfg.learning_rate, cfg.grad_clip);
    let n_windows = train_windows.len();
    let mut per_epoch_nll = Vec::with_capacity(cfg.epochs);
    let mut weights: Option<SampleWeights> = None;
    let mut best_val = f64::INFINITY;
    let mut validation_history = Vec::new();

    // Data-dependent ActNorm init from the first batch of epoch 1, before
    // any scoring or training passes.
    if !model.steps[0].actnorm.initialized {
        let first_order = {
            let mut idx: Vec<usize> = (0..n_windows).collect();
            let mut rng = rng_from(cfg.seed, "epoch-1");
            idx.shuffle(&mut rng);
            idx
        };
        let refs: Vec<&Window> = first_order[..cfg.batch_size.min(n_windows)]
            .iter()
            .map(|&i| &train_windows[i])
            .collect();
        let input = batch_from_windows(model, &refs, ScoreOptions::default())?;
        warnings.extend(actnorm_init(model, &input)?);
    }

    for epoch in 1..=cfg.epochs {
        // Sampler handoff: score the training set in eval mode once, at the
        // stage-switch epoch (optionally refreshed on an interval).
        let refresh_due = match (epoch >= cfg.next_stage_epoch, cfg.weight_refresh) {
            (false, _) => false,
            (true, None) => epoch == cfg.next_stage_epoch,
            (true, Some(interval)) => (epoch - cfg.next_stage_epoch) % interval.max(1) == 0,
        };
        if refresh_due {
            let refs: Vec<&Window> = train_windows.iter().collect();
            let scores = anomaly_scores_batched(model, &refs, ScoreOptions::default(), 64)?;
            weights = Some(compute_balanced_weights(&scores, cfg.bins)?);
        }

        let epoch_order: Vec<usize> = match &weights {
            None => {
                let mut idx: Vec<usize> = (0..n_windows).collect();
                let mut rng = rng_from(cfg.seed, &format!("epoch-{epoch}"));
                idx.shuffle(&mut rng);
                idx
            }
            Some(w) => weighted_sample(w, n_windows, hash_label(cfg.seed, &format!("resample-{epoch}"))),
        };

        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for batch_ids in epoch_order.chunks(cfg.batch_size) {
            let refs: Vec<&Window> = batch_ids.iter().map(|&i| &train_windows[i]).collect();
            let input = batch_from_windows(model, &refs, ScoreOptions::default())?;
            let tape = Tape::new();
            let mut bind = TapeBind::new();
            let fwd = forward_batch(&tape, &mut bind, model, &input)?;
            let loss = tape.scalar_value(fwd.mean_nll);
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            let mut grads = tape.backward(fwd.mean_nll);
            let mut per_param = bind.collect(&model.store, &mut grads);
            opt.step(&mut model.store, &mut per_param);
            epoch_loss += loss * refs.len() as f64;
            seen += refs.len();
        }
        per_epoch_nll.push(epoch_loss / seen as f64);

        let validate_now = epoch % 5 == 0 || epoch == cfg.epochs;
        if validate_now && !val_windows.is_empty() {
            let val_nll = mean_nll(model, &val_windows)?;
            validation_history.push((epoch, val_nll));
            if val_nll < best_val {
                best_val = val_nll;
                if let Some(dir) = checkpoint_dir {
                    crate::checkpoint::save_model(&dir.join("checkpoint_best.json"), model)?;
                }
            }
        }
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                crate::checkpoint::save_model(
                    &dir.join(format!("checkpoint_epoch{epoch:03}.json")),
                    model,
                )?;
            }
        }
    }

    let final_validation_nll = if val_windows.is_empty() {
        f64::NAN
    } else {
        mean_nll(model, &val_windows)?
    };
    let report = TrainReport {
        per_epoch_nll,
        sampler_stage_epoch: cfg.next_stage_epoch,
        final_validation_nll,
        wall_seconds: start.elapsed().as_secs_f64(),
        train_windows: n_windows,
        validation_windows: val_windows.len(),
        warnings,
        validation_history,
    };
    let summary = format!(
        "trained {} epochs on {} windows (val {}), final val NLL {:.3}, {:.1}s",
        cfg.epochs,
        n_windows,
        val_windows.len(),
        final_validation_nll,
        report.wall_seconds
    );
    Ok((report, summary))
}

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`
    /// over the checked parameters; any below-floor inconsistency is folded
    /// in as 1.0.
    pub max_rel_error: f64,
    /// Parameters compared against a resolvable finite difference.
    pub checked: usize,
    /// Parameters whose analytic gradient sits below the finite-difference
    /// noise floor; verified to have matching near-zero numeric estimates.
    pub below_floor: usize,
    /// Estimated resolvability floor for this loss and epsilon.
    pub noise_floor: f64,
}

/// Compare analytic parameter gradients of the single-window NLL against
/// central finite differences on a random subsample of at least
/// `min_params` resolvable parameters.
///
/// Central differences of a loss `L` cannot resolve derivatives below
/// roughly `|L| * eps_machine / epsilon`; parameters under that floor are
/// not ratio-tested (the ratio would measure rounding noise, not gradient
/// correctness) but are still verified to be consistently near zero in both
/// views, which is what catches a wrong formula there.
pub fn grad_check(
    model: &FlowModel,
    window: &Window,
    epsilon: f64,
    min_params: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut probe = model.clone();
    let input = batch_from_windows(&probe, &[window], ScoreOptions::default())?;

    // Analytic gradients, flattened in parameter-store order.
    let tape = Tape::new();
    let mut bind = TapeBind::new();
    let fwd = forward_batch(&tape, &mut bind, &probe, &input)?;
    let loss_value = tape.scalar_value(fwd.mean_nll);
    let mut grads = tape.backward(fwd.mean_nll);
    let per_param = bind.collect(&probe.store, &mut grads);
    let flat_analytic: Vec<f64> = per_param
        .iter()
        .flat_map(|g| g.iter().copied())
        .collect();

    // Cancellation noise of the central difference at this loss scale. A
    // ratio test at tolerance 1e-3 needs gradients three orders above it.
    let noise_floor = 8.0 * loss_value.abs().max(1.0) * f64::EPSILON / (2.0 * epsilon);
    let resolvable = |a: f64| a.abs() > 1000.0 * noise_floor;

    let n = probe.store.num_scalars();
    let mut rng = rng_from(seed, "grad-check");
    let mut picked: Vec<usize> = Vec::new();
    let mut tiny: Vec<usize> = Vec::new();
    let mut attempts = 0usize;
    while picked.len() < min_params.min(n) && attempts < 50 * n {
        attempts += 1;
        let idx = rand::Rng::gen_range(&mut rng, 0..n);
        if picked.contains(&idx) || tiny.contains(&idx) {
            continue;
        }
        if resolvable(flat_analytic[idx]) {
            picked.push(idx);
        } else if tiny.len() < min_params {
            tiny.push(idx);
        }
    }

    let nll_at = |probe: &FlowModel| -> Result<f64> {
        let tape = Tape::new();
        let mut bind = TapeBind::new();
        let fwd = forward_batch(&tape, &mut bind, probe, &input)?;
        Ok(tape.scalar_value(fwd.mean_nll))
    };

    let mut max_rel = 0.0f64;
    for idx in picked.iter().chain(tiny.iter()) {
        let idx = *idx;
        let (_, _, orig) = probe.store.get_flat(idx);
        probe.store.set_flat(idx, orig + epsilon);
        let up = nll_at(&probe)?;
        probe.store.set_flat(idx, orig - epsilon);
        let down = nll_at(&probe)?;
        probe.store.set_flat(idx, orig);
        let numeric = (up - down) / (2.0 * epsilon);
        let analytic = flat_analytic[idx];
        if resolvable(analytic) {
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max((analytic - numeric).abs() / denom);
        } else if numeric.abs() > 2000.0 * noise_floor {
            // The analytic gradient says (near) zero but the finite
            // difference clearly moves: a formula bug, not noise.
            max_rel = max_rel.max(1.0);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        checked: picked.len(),
        below_floor: tiny.len(),
        noise_floor,
    })
}
