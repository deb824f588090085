//! The conditional normalizing flow: a stack of invertible steps
//! (channel-wise ActNorm, PLU-parameterized channel mixing, and an affine
//! coupling whose parameters come from the coupling network), a Gaussian
//! prior whose mean is the broadcast task embedding, and exact
//! log-determinant bookkeeping.
//!
//! Channels: the two point coordinates crossed with a small number of
//! contiguous point groups (`C = 2 * G`). ActNorm and mixing act on this
//! channel axis within each frame, leaving the temporal axis untouched for
//! the coupling's temporal split. Successive steps alternate which temporal
//! half conditions and which is transformed.

use crate::autodiff::{Tape, Var};
use crate::dataset::{NormStats, Window};
use crate::error::{Error, Result};
use crate::params::{ParamStore, PId, TapeBind};
use crate::rcpqnet::{drop_batch, RcpqConfig, RcpqNet};
use crate::task_codec::{prior_mean, TaskCodebook};
use crate::util::{invert_small, rng_from};
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const LN_2PI: f64 = 1.8378770664093453;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlowConfig {
    /// Sliding-window length T (must be even).
    pub window: usize,
    /// Points per frame N.
    pub n_points: usize,
    /// Number of flow steps K.
    pub n_steps: usize,
    /// Robot joint count J (state dim is J + 1 + 7).
    pub joints: usize,
    /// Point groups per frame for the channel axis (C = 2 * groups).
    pub groups: usize,
    pub rcpq: RcpqConfig,
    /// Report scores divided by the dimensionality instead of raw.
    pub score_per_dim: bool,
}

impl FlowConfig {
    pub fn with_dims(window: usize, n_points: usize, n_steps: usize, joints: usize) -> FlowConfig {
        FlowConfig {
            window,
            n_points,
            n_steps,
            joints,
            groups: channel_groups(n_points),
            rcpq: RcpqConfig::default(),
            score_per_dim: false,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.joints + 1 + 7
    }

    pub fn dim(&self) -> usize {
        self.window * self.n_points * 2
    }

    pub fn channels(&self) -> usize {
        2 * self.groups
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 2 || self.window % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "window must be even and >= 2, got {}",
                self.window
            )));
        }
        if self.n_steps < 1 {
            return Err(Error::InvalidConfig("need at least one flow step".into()));
        }
        if self.n_points < 1 || self.n_points % self.groups != 0 {
            return Err(Error::InvalidConfig(format!(
                "points {} must divide into {} groups",
                self.n_points, self.groups
            )));
        }
        self.rcpq.validate()
    }
}

/// Largest group count <= 4 dividing the point count.
pub fn channel_groups(n_points: usize) -> usize {
    for g in (1..=4usize.min(n_points)).rev() {
        if n_points % g == 0 {
            return g;
        }
    }
    1
}

#[derive(Clone, Serialize, Deserialize)]
pub struct ActNorm {
    pub scale: PId,
    pub bias: PId,
    pub initialized: bool,
}

/// Invertible channel mixing, PLU-parameterized: a fixed permutation, a
/// learned unit-lower-triangular factor, and a learned upper factor whose
/// diagonal is `sign * exp(logdiag)`, so `log|det| = sum(logdiag)`.
#[derive(Clone, Serialize, Deserialize)]
pub struct Mixing {
    pub perm: Vec<usize>,
    pub signs: Vec<f64>,
    pub lower: PId,
    pub upper: PId,
    pub logdiag: PId,
}

#[derive(Clone, Serialize, Deserialize)]
pub struct FlowStep {
    pub actnorm: ActNorm,
    pub mixing: Mixing,
    pub coupling: RcpqNet,
    /// Whether the transformed half is the first temporal half.
    pub transformed_first: bool,
}

#[derive(Clone, Serialize, Deserialize)]
pub struct FlowModel {
    pub config: FlowConfig,
    pub steps: Vec<FlowStep>,
    pub store: ParamStore,
    pub codebook: TaskCodebook,
    pub norm_stats: NormStats,
}

/// Latent code of one window.
#[derive(Clone, Debug)]
pub struct LatentCode {
    pub z: Array3<f64>,
    pub log_det_total: f64,
    pub mu_task: Array3<f64>,
}

/// Eval-time ablations used by the benchmark.
#[derive(Clone, Copy, Debug, Default)]
pub struct ScoreOptions {
    /// Drop the task embedding: zero the latent prior mean and the FiLM
    /// input (FiLM is parameterized so a zero embedding is the identity
    /// modulation), leaving a task-agnostic model.
    pub zero_mu_task: bool,
    /// Zero the normalized robot-state conditioning.
    pub zero_robot_state: bool,
}

impl FlowModel {
    pub fn new(config: FlowConfig, codebook: TaskCodebook, seed: u64) -> Result<FlowModel> {
        config.validate()?;
        if codebook.dim != config.window {
            return Err(Error::InvalidConfig(format!(
                "codebook dimension {} must equal the window length {}",
                codebook.dim, config.window
            )));
        }
        let mut store = ParamStore::new();
        let mut steps = Vec::with_capacity(config.n_steps);
        let c = config.channels();
        for k in 0..config.n_steps {
            let name = format!("step{k:02}");
            let scale = store.add(&format!("{name}.actnorm.scale"), ArrayD::ones(IxDyn(&[c])));
            let bias = store.add(&format!("{name}.actnorm.bias"), ArrayD::zeros(IxDyn(&[c])));
            let mixing = init_mixing(&mut store, &name, c, seed.wrapping_add(k as u64));
            let mut rng = rng_from(seed, &format!("{name}.coupling"));
            let coupling = RcpqNet::new(
                &mut store,
                &mut rng,
                &format!("{name}.rcpq"),
                config.rcpq,
                config.window,
                config.n_points,
                config.state_dim(),
            );
            steps.push(FlowStep {
                actnorm: ActNorm {
                    scale,
                    bias,
                    initialized: false,
                },
                mixing,
                coupling,
                transformed_first: k % 2 == 1,
            });
        }
        let state_dim = config.state_dim();
        Ok(FlowModel {
            config,
            steps,
            store,
            codebook,
            norm_stats: NormStats {
                mean: vec![0.0; state_dim],
                std: vec![1.0; state_dim],
            },
        })
    }

    /// Mark every ActNorm initialized with its identity parameters (used by
    /// tests and random-weight suites that skip data-dependent init).
    pub fn mark_actnorm_identity(&mut self) {
        for s in self.steps.iter_mut() {
            s.actnorm.initialized = true;
        }
    }
}

fn init_mixing(store: &mut ParamStore, name: &str, c: usize, seed: u64) -> Mixing {
    // Random rotation via Gram-Schmidt, then one-time LU with partial
    // pivoting; the permutation and diagonal signs stay fixed.
    let mut rng = rng_from(seed, &format!("{name}.mixing"));
    let mut m = Array2::<f64>::zeros((c, c));
    loop {
        for v in m.iter_mut() {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            *v = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
        if gram_schmidt(&mut m) {
            break;
        }
    }
    let (perm, l, u) = lu_decompose(&m);
    let mut signs = vec![0.0; c];
    let mut logdiag = vec![0.0; c];
    let mut upper = Array2::<f64>::zeros((c, c));
    for i in 0..c {
        signs[i] = u[[i, i]].signum();
        logdiag[i] = u[[i, i]].abs().ln();
        for j in i + 1..c {
            upper[[i, j]] = u[[i, j]];
        }
    }
    let mut lower = Array2::<f64>::zeros((c, c));
    for i in 0..c {
        for j in 0..i {
            lower[[i, j]] = l[[i, j]];
        }
    }
    Mixing {
        perm,
        signs,
        lower: store.add(&format!("{name}.mixing.lower"), lower.into_dyn()),
        upper: store.add(&format!("{name}.mixing.upper"), upper.into_dyn()),
        logdiag: store.add(
            &format!("{name}.mixing.logdiag"),
            ArrayD::from_shape_vec(IxDyn(&[c]), logdiag).unwrap(),
        ),
    }
}

fn gram_schmidt(m: &mut Array2<f64>) -> bool {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let dot = m.row(i).dot(&m.row(j));
            let rj = m.row(j).to_owned();
            m.row_mut(i).zip_mut_with(&rj, |a, &b| *a -= dot * b);
        }
        let norm = m.row(i).dot(&m.row(i)).sqrt();
        if norm < 1e-6 {
            return false;
        }
        m.row_mut(i).mapv_inplace(|v| v / norm);
    }
    true
}

/// Partial-pivot LU: returns (perm, L, U) with `W[perm[i], :]` giving row i
/// of the factored matrix, i.e. `W = P^T L U` with `P[i, perm[i]] = 1`.
fn lu_decompose(w: &Array2<f64>) -> (Vec<usize>, Array2<f64>, Array2<f64>) {
    let n = w.nrows();
    let mut u = w.clone();
    let mut l = Array2::<f64>::eye(n);
    let mut perm: Vec<usize> = (0..n).collect();
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if u[[r, col]].abs() > u[[piv, col]].abs() {
                piv = r;
            }
        }
        if piv != col {
            perm.swap(col, piv);
            for k in 0..n {
                u.swap([col, k], [piv, k]);
            }
            for k in 0..col {
                l.swap([col, k], [piv, k]);
            }
        }
        for r in col + 1..n {
            let f = u[[r, col]] / u[[col, col]];
            l[[r, col]] = f;
            for k in col..n {
                u[[r, k]] -= f * u[[col, k]];
            }
        }
    }
    (perm, l, u)
}

fn perm_matrix_t(perm: &[usize]) -> Array2<f64> {
    // P with P[i, perm[i]] = 1 reorders rows; we need W = P^T L U.
    let n = perm.len();
    let mut pt = Array2::<f64>::zeros((n, n));
    for (i, &p) in perm.iter().enumerate() {
        pt[[p, i]] = 1.0;
    }
    pt
}

// ---------------------------------------------------------------------------
// Channel layout
// ---------------------------------------------------------------------------

/// `[B, T, N, 2] -> [B*T*J, C]` with channels = (point group, coordinate).
fn to_channels(t: &Tape, x: Var, cfg: &FlowConfig, batch: usize) -> Var {
    let (tw, n, g) = (cfg.window, cfg.n_points, cfg.groups);
    let j = n / g;
    let x = t.reshape(x, &[batch, tw, g, j, 2]);
    let x = t.permute(x, &[0, 1, 3, 2, 4]);
    t.reshape(x, &[batch * tw * j, 2 * g])
}

/// Channel-row multiplicity of one window (positions each channel touches).
fn channel_multiplicity(cfg: &FlowConfig) -> f64 {
    (cfg.window * (cfg.n_points / cfg.groups)) as f64
}

// ---------------------------------------------------------------------------
// Step forward (tape) and inverse (values)
// ---------------------------------------------------------------------------

struct StepOut {
    y: Var,
    /// Per-window log-determinant contribution, `[B]`.
    log_det: Var,
}

fn assemble_mixing(t: &Tape, bind: &mut TapeBind, store: &ParamStore, mixing: &Mixing, c: usize) -> Var {
    let lower_mask = {
        let mut m = Array2::<f64>::zeros((c, c));
        for i in 0..c {
            for j in 0..i {
                m[[i, j]] = 1.0;
            }
        }
        t.constant(m.into_dyn())
    };
    let upper_mask = {
        let mut m = Array2::<f64>::zeros((c, c));
        for i in 0..c {
            for j in i + 1..c {
                m[[i, j]] = 1.0;
            }
        }
        t.constant(m.into_dyn())
    };
    let eye = t.constant(Array2::<f64>::eye(c).into_dyn());
    let lower = bind.param(t, store, mixing.lower);
    let upper = bind.param(t, store, mixing.upper);
    let logdiag = bind.param(t, store, mixing.logdiag);
    let l = t.add(t.mul(lower, lower_mask), eye);
    let signs = t.constant(
        ArrayD::from_shape_vec(IxDyn(&[c, 1]), mixing.signs.clone()).unwrap(),
    );
    let diag_col = t.mul(t.reshape(t.exp(logdiag), &[c, 1]), signs);
    let d = t.mul(eye, diag_col);
    let u = t.add(t.mul(upper, upper_mask), d);
    let pt = t.constant(perm_matrix_t(&mixing.perm).into_dyn());
    t.matmul(pt, t.matmul(l, u))
}

fn step_forward_tape(
    t: &Tape,
    bind: &mut TapeBind,
    store: &ParamStore,
    step: &FlowStep,
    cfg: &FlowConfig,
    x: Var,
    s_norm: Var,
    tau: Var,
) -> Result<StepOut> {
    if !step.actnorm.initialized {
        return Err(Error::UninitializedActnorm);
    }
    let c = cfg.channels();
    let mult = channel_multiplicity(cfg);

    // Fused ActNorm + channel mixing.
    let scale = bind.param(t, store, step.actnorm.scale);
    let bias = bind.param(t, store, step.actnorm.bias);
    let w = assemble_mixing(t, bind, store, &step.mixing, c);
    let x = t.channel_affine_mix(x, scale, bias, w, cfg.groups);
    // log|scale| as 0.5 * ln(scale^2): valid for any nonzero sign.
    let ld_act = t.mul_scalar(t.sum_all(t.ln(t.square(scale))), 0.5 * mult);
    let logdiag = bind.param(t, store, step.mixing.logdiag);
    let ld_mix = t.mul_scalar(t.sum_all(logdiag), mult);

    // Coupling: split along the temporal axis.
    let th = cfg.window / 2;
    let (x_b, x_t) = if step.transformed_first {
        (t.slice(x, 1, th, cfg.window), t.slice(x, 1, 0, th))
    } else {
        (t.slice(x, 1, 0, th), t.slice(x, 1, th, cfg.window))
    };
    let cp = step
        .coupling
        .coupling_params(t, bind, store, x_b, s_norm, tau, step.transformed_first);
    let y_t = t.add(t.mul(cp.gamma, x_t), cp.beta);
    let y = if step.transformed_first {
        t.concat(&[y_t, x_b], 1)
    } else {
        t.concat(&[x_b, y_t], 1)
    };
    let log_det = t.add(t.add(cp.log_gamma_sum, ld_act), ld_mix);
    Ok(StepOut { y, log_det })
}

fn mixing_matrix_values(store: &ParamStore, mixing: &Mixing) -> Array2<f64> {
    let c = mixing.perm.len();
    let lower = store
        .value(mixing.lower)
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
    let upper = store
        .value(mixing.upper)
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
    let logdiag = store.value(mixing.logdiag);
    let mut l = Array2::<f64>::eye(c);
    let mut u = Array2::<f64>::zeros((c, c));
    for i in 0..c {
        u[[i, i]] = mixing.signs[i] * logdiag[[i]].exp();
        for j in 0..i {
            l[[i, j]] = lower[[i, j]];
        }
        for j in i + 1..c {
            u[[i, j]] = upper[[i, j]];
        }
    }
    perm_matrix_t(&mixing.perm).dot(&l).dot(&u)
}

/// Exact algebraic inverse of one step (value path, no gradients).
fn step_inverse_values(
    model: &FlowModel,
    step: &FlowStep,
    y: &Array3<f64>,
    s_norm: &Array2<f64>,
    tau: &[f64],
) -> Result<Array3<f64>> {
    if !step.actnorm.initialized {
        return Err(Error::UninitializedActnorm);
    }
    let cfg = &model.config;
    let th = cfg.window / 2;
    let n = cfg.n_points;

    // Undo the coupling.
    let (xb_range, xt_range) = if step.transformed_first {
        (th..cfg.window, 0..th)
    } else {
        (0..th, th..cfg.window)
    };
    let x_b = y
        .slice(ndarray::s![xb_range.clone(), .., ..])
        .to_owned()
        .into_dyn();
    let y_t = y.slice(ndarray::s![xt_range.clone(), .., ..]).to_owned();
    let s_dyn = s_norm.clone().into_dyn();
    let (gamma, beta) = crate::rcpqnet::coupling_params_values(
        &step.coupling,
        &model.store,
        &x_b,
        &s_dyn,
        tau,
        step.transformed_first,
    );
    let gamma = gamma.into_dimensionality::<ndarray::Ix3>().unwrap();
    let beta = beta.into_dimensionality::<ndarray::Ix3>().unwrap();
    let x_t = (&y_t - &beta) / &gamma;

    let mut x = Array3::<f64>::zeros((cfg.window, n, 2));
    x.slice_mut(ndarray::s![xb_range, .., ..]).assign(
        &x_b.view().into_dimensionality::<ndarray::Ix3>().unwrap(),
    );
    x.slice_mut(ndarray::s![xt_range, .., ..]).assign(&x_t);

    // Undo mixing and ActNorm on the channel rows.
    let w = mixing_matrix_values(&model.store, &step.mixing);
    let w_inv = invert_small(&w).ok_or(Error::SingularMixing)?;
    let scale = model.store.value(step.actnorm.scale);
    let bias = model.store.value(step.actnorm.bias);
    let g = cfg.groups;
    let j = n / g;
    let c = cfg.channels();
    let mut out = Array3::<f64>::zeros((cfg.window, n, 2));
    let mut row = vec![0.0f64; c];
    for tf in 0..cfg.window {
        for jj in 0..j {
            for gg in 0..g {
                for k in 0..2 {
                    row[gg * 2 + k] = x[[tf, gg * j + jj, k]];
                }
            }
            // row <- row . W^-1, then invert the affine.
            let mut mixed = vec![0.0f64; c];
            for (cc, m) in mixed.iter_mut().enumerate() {
                for (rc, r) in row.iter().enumerate() {
                    *m += r * w_inv[[rc, cc]];
                }
            }
            for gg in 0..g {
                for k in 0..2 {
                    let cc = gg * 2 + k;
                    out[[tf, gg * j + jj, k]] = (mixed[cc] - bias[[cc]]) / scale[[cc]];
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Batched model passes
// ---------------------------------------------------------------------------

/// Inputs of a batch, already normalized/broadcast.
pub struct BatchInput {
    pub x: ArrayD<f64>,
    pub s_norm: ArrayD<f64>,
    pub tau: ArrayD<f64>,
    pub mu: ArrayD<f64>,
}

pub fn batch_from_windows(
    model: &FlowModel,
    windows: &[&Window],
    opts: ScoreOptions,
) -> Result<BatchInput> {
    let cfg = &model.config;
    let b = windows.len();
    let (tw, n, sd) = (cfg.window, cfg.n_points, cfg.state_dim());
    let mut x = ArrayD::zeros(IxDyn(&[b, tw, n, 2]));
    let mut s = ArrayD::zeros(IxDyn(&[b, tw, sd]));
    let mut tau = ArrayD::zeros(IxDyn(&[b, tw]));
    let mut mu = ArrayD::zeros(IxDyn(&[b, tw, n, 2]));
    for (i, w) in windows.iter().enumerate() {
        if w.x.shape() != [tw, n, 2] {
            return Err(Error::ShapeMismatch(format!(
                "window x has shape {:?}, model expects [{tw}, {n}, 2]",
                w.x.shape()
            )));
        }
        let emb = model.codebook.embed_task(&w.task_id)?;
        let s_norm = model.norm_stats.apply(&w.s);
        for t in 0..tw {
            for p in 0..n {
                x[[i, t, p, 0]] = w.x[[t, p, 0]];
                x[[i, t, p, 1]] = w.x[[t, p, 1]];
            }
            for d in 0..sd {
                s[[i, t, d]] = if opts.zero_robot_state { 0.0 } else { s_norm[[t, d]] };
            }
            if !opts.zero_mu_task {
                tau[[i, t]] = emb.vector[t];
                for p in 0..n {
                    mu[[i, t, p, 0]] = emb.vector[t];
                    mu[[i, t, p, 1]] = emb.vector[t];
                }
            }
        }
    }
    Ok(BatchInput { x, s_norm: s, tau, mu })
}

pub struct BatchForward {
    pub z: Var,
    pub log_det: Var,
    /// Per-window log-likelihood, `[B]`.
    pub logp: Var,
    /// Mean negative log-likelihood (the training loss), scalar.
    pub mean_nll: Var,
}

/// Full forward pass on a tape (used for both training and scoring).
pub fn forward_batch(
    t: &Tape,
    bind: &mut TapeBind,
    model: &FlowModel,
    input: &BatchInput,
) -> Result<BatchForward> {
    let cfg = &model.config;
    let b = input.x.shape()[0];
    let mut y = t.constant(input.x.clone());
    let s = t.constant(input.s_norm.clone());
    let tau = t.constant(input.tau.clone());
    let mut log_det = t.constant(ArrayD::zeros(IxDyn(&[b])));
    for step in &model.steps {
        let out = step_forward_tape(t, bind, &model.store, step, cfg, y, s, tau)?;
        y = out.y;
        log_det = t.add(log_det, out.log_det);
    }
    let mu = t.constant(input.mu.clone());
    let diff = t.sub(y, mu);
    let sq = t.square(diff);
    let flat = t.reshape(sq, &[b, cfg.dim()]);
    let sq_sum = t.sum_axis(flat, 1);
    let konst = -(cfg.dim() as f64) / 2.0 * LN_2PI;
    let logp = t.add_scalar(t.add(t.mul_scalar(sq_sum, -0.5), log_det), konst);
    let nll = t.mul_scalar(t.sum_all(logp), -1.0 / b as f64);
    Ok(BatchForward {
        z: y,
        log_det,
        logp,
        mean_nll: nll,
    })
}

// ---------------------------------------------------------------------------
// Single-window API
// ---------------------------------------------------------------------------

/// Conditional log-likelihood of one window under the flow.
pub fn log_likelihood(
    model: &FlowModel,
    x: &Array3<f64>,
    s_raw: &Array2<f64>,
    task_id: &str,
) -> Result<(f64, LatentCode)> {
    log_likelihood_with(model, x, s_raw, task_id, ScoreOptions::default())
}

pub fn log_likelihood_with(
    model: &FlowModel,
    x: &Array3<f64>,
    s_raw: &Array2<f64>,
    task_id: &str,
    opts: ScoreOptions,
) -> Result<(f64, LatentCode)> {
    let cfg = &model.config;
    if x.shape() != [cfg.window, cfg.n_points, 2] {
        return Err(Error::ShapeMismatch(format!(
            "x has shape {:?}, expected [{}, {}, 2]",
            x.shape(),
            cfg.window,
            cfg.n_points
        )));
    }
    let w = Window {
        x: x.clone(),
        s: s_raw.clone(),
        task_id: task_id.to_string(),
        label: crate::scene_sim::Label::Normal,
        source: (String::new(), 0),
    };
    let input = batch_from_windows(model, &[&w], opts)?;
    let t = Tape::new();
    let mut bind = TapeBind::new();
    let fwd = forward_batch(&t, &mut bind, model, &input)?;
    let logp = t.value(fwd.logp)[[0]];
    let z = drop_batch(&t.value(fwd.z))
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap();
    let log_det_total = t.value(fwd.log_det)[[0]];
    let emb = model.codebook.embed_task(task_id)?;
    let mu = if opts.zero_mu_task {
        Array3::zeros((cfg.window, cfg.n_points, 2))
    } else {
        prior_mean(emb, (cfg.window, cfg.n_points, 2))?
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap()
    };
    Ok((
        logp,
        LatentCode {
            z,
            log_det_total,
            mu_task: mu,
        },
    ))
}

/// Negative conditional log-likelihood (optionally per-dimension).
pub fn anomaly_score(
    model: &FlowModel,
    x: &Array3<f64>,
    s_raw: &Array2<f64>,
    task_id: &str,
) -> Result<f64> {
    anomaly_score_with(model, x, s_raw, task_id, ScoreOptions::default())
}

pub fn anomaly_score_with(
    model: &FlowModel,
    x: &Array3<f64>,
    s_raw: &Array2<f64>,
    task_id: &str,
    opts: ScoreOptions,
) -> Result<f64> {
    let (logp, _) = log_likelihood_with(model, x, s_raw, task_id, opts)?;
    let raw = -logp;
    Ok(if model.config.score_per_dim {
        raw / model.config.dim() as f64
    } else {
        raw
    })
}

/// Batched scores for many windows (chunked; value path only).
pub fn anomaly_scores_batched(
    model: &FlowModel,
    windows: &[&Window],
    opts: ScoreOptions,
    chunk: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(windows.len());
    for group in windows.chunks(chunk.max(1)) {
        let input = batch_from_windows(model, group, opts)?;
        let t = Tape::new();
        let mut bind = TapeBind::new();
        let fwd = forward_batch(&t, &mut bind, model, &input)?;
        let logp = t.value(fwd.logp);
        for i in 0..group.len() {
            let raw = -logp[[i]];
            out.push(if model.config.score_per_dim {
                raw / model.config.dim() as f64
            } else {
                raw
            });
        }
    }
    Ok(out)
}

/// Map a latent window back through the inverse flow.
pub fn inverse(
    model: &FlowModel,
    z: &Array3<f64>,
    s_raw: &Array2<f64>,
    task_id: &str,
) -> Result<Array3<f64>> {
    let emb = model.codebook.embed_task(task_id)?;
    let s_norm = model.norm_stats.apply(s_raw);
    let mut y = z.clone();
    for step in model.steps.iter().rev() {
        y = step_inverse_values(model, step, &y, &s_norm, &emb.vector)?;
    }
    Ok(y)
}

/// Forward map of one window (values only): returns (z, log_det_total).
pub fn forward_window(
    model: &FlowModel,
    x: &Array3<f64>,
    s_raw: &Array2<f64>,
    task_id: &str,
) -> Result<(Array3<f64>, f64)> {
    let (_, code) = log_likelihood(model, x, s_raw, task_id)?;
    Ok((code.z, code.log_det_total))
}

// ---------------------------------------------------------------------------
// ActNorm data-dependent initialization
// ---------------------------------------------------------------------------

/// Initialize every step's ActNorm from the first batch, sequentially: each
/// step sees activations produced by the already-initialized steps before
/// it. Returns the names of degenerate (near-constant) channels.
pub fn actnorm_init(model: &mut FlowModel, input: &BatchInput) -> Result<Vec<String>> {
    let mut warnings = Vec::new();
    let cfg = model.config.clone();
    let b = input.x.shape()[0];
    let c = cfg.channels();
    let mut current = input.x.clone();
    for idx in 0..model.steps.len() {
        if model.steps[idx].actnorm.initialized {
            return Err(Error::AlreadyInitialized);
        }
        // Channel statistics of the incoming activations.
        let t = Tape::new();
        let x = t.constant(current.clone());
        let rows_var = to_channels(&t, x, &cfg, b);
        let rows = t.value(rows_var);
        let nrows = rows.shape()[0] as f64;
        let mut scale = vec![0.0f64; c];
        let mut bias = vec![0.0f64; c];
        for ch in 0..c {
            let col = rows.index_axis(ndarray::Axis(1), ch);
            let mean = col.sum() / nrows;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nrows;
            if var < 1e-12 {
                warnings.push(format!("step {idx}: channel {ch} has near-zero variance"));
                scale[ch] = 1.0;
                bias[ch] = -mean;
            } else {
                let s = 1.0 / var.sqrt();
                scale[ch] = s;
                bias[ch] = -mean * s;
            }
        }
        model.store.set(
            model.steps[idx].actnorm.scale,
            &ArrayD::from_shape_vec(IxDyn(&[c]), scale).unwrap(),
        );
        model.store.set(
            model.steps[idx].actnorm.bias,
            &ArrayD::from_shape_vec(IxDyn(&[c]), bias).unwrap(),
        );
        model.steps[idx].actnorm.initialized = true;

        // Push the batch through the now-complete step.
        let t = Tape::new();
        let mut bind = TapeBind::new();
        let x = t.constant(current);
        let s = t.constant(input.s_norm.clone());
        let tau = t.constant(input.tau.clone());
        let out = step_forward_tape(&t, &mut bind, &model.store, &model.steps[idx], &cfg, x, s, tau)?;
        current = t.value(out.y);
    }
    Ok(warnings)
}
