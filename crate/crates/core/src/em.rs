//! Hard/soft EM over the denoiser and the pattern recognizer.
//!
//! E step: guided reverse chain, where the recognizer's BCE gradient pushes the
//! missing coordinates of `X̂₀` toward values that explain the observed mask.
//! M step: one denoising step on the completed data and one recognizer step
//! per minibatch. The no-recognizer baseline is the same loop with
//! `guidance_scale = 0` and a frozen zero-weight recognizer.

use log::{info, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{MaskedDataset, NormStats};
use crate::diffusion::schedule::{forward_sample_rows, standard_normal};
use crate::diffusion::train::minibatches;
use crate::diffusion::{diff_loss, reverse_chain, Conditioning, Denoiser, DiffLossConfig, Guidance, NoiseSchedule, StepContext};
use crate::error::{Error, Result};
use crate::eval::{compute_metrics, MetricsReport};
use crate::numerics::{optimizer_step, OptimizerKind, OptimizerState, Tensor};
use crate::recognizer::{pr_loss, pr_row_input_grad, pr_train_step, PatternRecognizer};
use crate::seed::mix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidancePath {
    /// Backpropagate through the denoiser into `X_t`.
    FullChain,
    /// Approximate `∂X̂₀/∂X_t` by `1/√ᾱ_t`.
    X0hatOnly,
}

/// How the per-row guidance gradient is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceReduction {
    /// Gradient of the summed BCE of a row.
    RowSum,
    /// Gradient of the mean BCE of a row (`1/D` of `row_sum`).
    RowMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmMode {
    Hard,
    Soft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmConfig {
    pub em_iterations: usize,
    pub maximization_epochs: usize,
    pub batch_size: usize,
    pub lr_theta: f64,
    pub lr_phi: f64,
    pub guidance_scale: f64,
    pub guidance_path: GuidancePath,
    pub guidance_reduction: GuidanceReduction,
    pub em_mode: EmMode,
    pub soft_samples: usize,
    /// Per-row clip on the guidance gradient; `None` uses `10·√D`.
    pub grad_clip_norm: Option<f64>,
    /// `false` freezes the recognizer (no φ updates).
    pub train_recognizer: bool,
    pub optimizer: OptimizerKind,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            em_iterations: 100,
            maximization_epochs: 1,
            batch_size: 64,
            lr_theta: 1e-3,
            lr_phi: 1e-3,
            guidance_scale: 1.0,
            guidance_path: GuidancePath::FullChain,
            guidance_reduction: GuidanceReduction::RowSum,
            em_mode: EmMode::Hard,
            soft_samples: 4,
            grad_clip_norm: None,
            train_recognizer: true,
            optimizer: OptimizerKind::default(),
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.em_iterations == 0 {
            return Err(Error::InvalidArgument("em_iterations must be at least 1".into()));
        }
        if self.maximization_epochs == 0 {
            return Err(Error::InvalidArgument("maximization_epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::InvalidArgument("guidance_scale must be finite and non-negative".into()));
        }
        if self.lr_theta < 0.0 || self.lr_phi < 0.0 {
            return Err(Error::InvalidArgument("learning rates must be non-negative".into()));
        }
        if self.em_mode == EmMode::Soft && self.soft_samples < 2 {
            return Err(Error::InvalidArgument("soft EM needs at least two samples".into()));
        }
        if let Some(c) = self.grad_clip_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::InvalidArgument("grad_clip_norm must be positive".into()));
            }
        }
        Ok(())
    }

    /// Baseline mode: no guidance and a frozen recognizer.
    pub fn is_baseline(&self) -> bool {
        self.guidance_scale == 0.0 && !self.train_recognizer
    }

    pub fn clip_for(&self, dim: usize) -> f64 {
        self.grad_clip_norm.unwrap_or(10.0 * (dim as f64).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub l_diff: f64,
    pub l_pr: f64,
    pub metrics: Option<MetricsReport>,
}

#[derive(Debug, Clone)]
pub struct EmState {
    pub denoiser: Denoiser,
    pub recognizer: PatternRecognizer,
    /// Completed training matrix; equals the observations wherever `m = 1`.
    pub imputed: Tensor,
    pub iteration: usize,
    pub trace: Vec<TraceRow>,
    opt_theta: OptimizerState,
    opt_phi: OptimizerState,
}

impl EmState {
    pub fn new(denoiser: Denoiser, recognizer: PatternRecognizer, x0_obs: &Tensor, cfg: &EmConfig) -> Self {
        Self {
            denoiser,
            recognizer,
            imputed: x0_obs.clone(),
            iteration: 0,
            trace: Vec::new(),
            opt_theta: OptimizerState::new(cfg.optimizer),
            opt_phi: OptimizerState::new(cfg.optimizer),
        }
    }
}

/// Recognizer guidance for the reverse chain.
struct PrGuidance<'a> {
    pr: &'a PatternRecognizer,
    scale: f64,
    path: GuidancePath,
    reduction: GuidanceReduction,
    clip: f64,
}

impl Guidance for PrGuidance<'_> {
    fn correction(&self, ctx: &StepContext<'_>, x0_hat: &Tensor) -> Result<Option<Tensor>> {
        let mut h = pr_row_input_grad(ctx.mask, x0_hat, self.pr)?;
        if self.reduction == GuidanceReduction::RowSum {
            h = h.scale(h.cols() as f64);
        }
        zero_observed(&mut h, ctx.mask);
        let ab = ctx.sched.alpha_bar(ctx.t);
        let mut g = match self.path {
            GuidancePath::FullChain => ctx.denoiser.input_grad_xt(ctx.cache, ctx.cond, ctx.t, ctx.sched, &h)?,
            GuidancePath::X0hatOnly => h.scale(1.0 / ab.sqrt()),
        };
        zero_observed(&mut g, ctx.mask);
        let coef = self.scale * (1.0 - ab) / ab.sqrt();
        for i in 0..g.rows() {
            let row = g.row_mut(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let c = if norm > self.clip { coef * self.clip / norm } else { coef };
            row.iter_mut().for_each(|v| *v *= c);
        }
        Ok(Some(g))
    }
}

fn zero_observed(t: &mut Tensor, m: &Tensor) {
    for (v, &mk) in t.values_mut().iter_mut().zip(m.values()) {
        if mk == 1.0 {
            *v = 0.0;
        }
    }
}

/// One E step with explicit parameters. Draws a single `u64` from `rng`,
/// exactly as [`crate::diffusion::sample_unguided`] does.
#[allow(clippy::too_many_arguments)]
pub fn impute_with<R: Rng + ?Sized>(
    denoiser: &Denoiser,
    recognizer: &PatternRecognizer,
    x0_obs: &Tensor,
    m: &Tensor,
    sched: &NoiseSchedule,
    cfg: &EmConfig,
    rng: &mut R,
) -> Result<Tensor> {
    if recognizer.dim() != denoiser.dim() {
        return Err(Error::Shape("denoiser and recognizer widths differ".into()));
    }
    let base = rng.random::<u64>();
    let guidance = (cfg.guidance_scale > 0.0).then(|| PrGuidance {
        pr: recognizer,
        scale: cfg.guidance_scale,
        path: cfg.guidance_path,
        reduction: cfg.guidance_reduction,
        clip: cfg.clip_for(denoiser.dim()),
    });
    let g = guidance.as_ref().map(|g| g as &dyn Guidance);
    match cfg.em_mode {
        EmMode::Hard => reverse_chain(denoiser, x0_obs, m, sched, base, g),
        EmMode::Soft => {
            let k = cfg.soft_samples.max(1);
            let mut acc = Tensor::zeros(x0_obs.shape());
            for s in 0..k {
                let draw = reverse_chain(denoiser, x0_obs, m, sched, mix64(base ^ s as u64), g)?;
                for (a, v) in acc.values_mut().iter_mut().zip(draw.values()) {
                    *a += v;
                }
            }
            let inv = 1.0 / k as f64;
            for ((a, &o), &mk) in acc.values_mut().iter_mut().zip(x0_obs.values()).zip(m.values()) {
                *a = if mk == 1.0 { o } else { *a * inv };
            }
            Ok(acc)
        }
    }
}

pub fn e_step<R: Rng + ?Sized>(
    state: &EmState,
    x0_obs: &Tensor,
    m: &Tensor,
    sched: &NoiseSchedule,
    cfg: &EmConfig,
    rng: &mut R,
) -> Result<Tensor> {
    impute_with(&state.denoiser, &state.recognizer, x0_obs, m, sched, cfg, rng)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MStepLosses {
    pub l_diff: f64,
    pub l_pr: f64,
}

/// `N_m` epochs of joint updates on the completed matrix `x_imp`.
pub fn m_step<R: Rng + ?Sized>(
    state: &mut EmState,
    x_imp: &Tensor,
    m: &Tensor,
    sched: &NoiseSchedule,
    cfg: &EmConfig,
    rng: &mut R,
) -> Result<MStepLosses> {
    x_imp.ensure_same_shape(m, "imputed matrix vs mask")?;
    if !x_imp.is_finite() {
        return Err(Error::Data("imputed matrix has non-finite entries".into()));
    }
    let loss_cfg = DiffLossConfig::default();
    let (mut sum_diff, mut sum_pr, mut batches) = (0.0, 0.0, 0usize);
    for _ in 0..cfg.maximization_epochs {
        for idx in minibatches(x_imp.rows(), cfg.batch_size, rng) {
            let x0 = x_imp.select_rows(&idx);
            let mb = m.select_rows(&idx);
            let obs = x0.zip_map(&mb, |v, mk| v * mk)?;
            let steps: Vec<usize> = idx.iter().map(|_| sched.sample_step(rng)).collect();
            let eps = standard_normal(x0.shape(), rng);
            let x_t = forward_sample_rows(&x0, &steps, &eps, sched);
            let ones = Tensor::full(x0.shape(), 1.0);
            let cond = Conditioning {
                obs_masked: &obs,
                mask: &mb,
            };
            let (l_diff, grads) = diff_loss(&state.denoiser, &x0, &ones, &x_t, &steps, sched, cond, &loss_cfg)?;
            optimizer_step(state.denoiser.net_mut(), &grads, &mut state.opt_theta, cfg.lr_theta)?;
            let l_pr = if cfg.train_recognizer {
                pr_train_step(&mut state.recognizer, &mb, &x0, cfg.lr_phi, &mut state.opt_phi)?
            } else {
                pr_loss(&mb, &x0, &state.recognizer)?
            };
            sum_diff += l_diff;
            sum_pr += l_pr;
            batches += 1;
        }
    }
    let n = batches.max(1) as f64;
    Ok(MStepLosses {
        l_diff: sum_diff / n,
        l_pr: sum_pr / n,
    })
}

/// Ground truth and units for per-iteration in-sample metrics.
#[derive(Debug, Clone, Copy)]
pub struct Monitor<'a> {
    pub truth: &'a Tensor,
    /// Entries to score, usually the originally missing ones.
    pub eval_mask: &'a Tensor,
    /// Evaluate in data units by inverting these statistics.
    pub stats: Option<&'a NormStats>,
}

impl Monitor<'_> {
    pub fn metrics(&self, imputed: &Tensor) -> Result<Option<MetricsReport>> {
        if self.eval_mask.sum() == 0.0 {
            return Ok(None);
        }
        let (t, h) = match self.stats {
            Some(s) => (s.invert(self.truth)?, s.invert(imputed)?),
            None => (self.truth.clone(), imputed.clone()),
        };
        compute_metrics(&t, &h, self.eval_mask).map(Some)
    }
}

pub type IterationCallback<'a> = &'a mut dyn FnMut(&EmState) -> Result<()>;

/// Optional observers for [`run_em`].
#[derive(Default)]
pub struct EmHooks<'a> {
    pub monitor: Option<Monitor<'a>>,
    /// Called after every iteration's M step.
    pub on_iteration: Option<IterationCallback<'a>>,
}

/// `K` iterations of (E step, M step) followed by a final E step whose
/// output is the in-sample imputation.
pub fn run_em<R: Rng + ?Sized>(
    denoiser: Denoiser,
    recognizer: PatternRecognizer,
    train: &MaskedDataset,
    sched: &NoiseSchedule,
    cfg: &EmConfig,
    mut hooks: EmHooks<'_>,
    rng: &mut R,
) -> Result<EmState> {
    cfg.validate()?;
    if train.cols() != denoiser.dim() {
        return Err(Error::Shape(format!(
            "denoiser expects {} columns, data has {}",
            denoiser.dim(),
            train.cols()
        )));
    }
    if cfg.is_baseline() && !recognizer.is_zero() {
        warn!("baseline mode with a non-zero recognizer: guidance is off but predictions are not neutral");
    }
    let x0_obs = train.observed();
    let m = &train.m;
    let mut state = EmState::new(denoiser, recognizer, &x0_obs, cfg);
    for k in 1..=cfg.em_iterations {
        let imputed = e_step(&state, &x0_obs, m, sched, cfg, rng)?;
        let losses = m_step(&mut state, &imputed, m, sched, cfg, rng)?;
        let metrics = match &hooks.monitor {
            Some(mon) => mon.metrics(&imputed)?,
            None => None,
        };
        info!(
            "em {k}/{}: L_diff {:.5} L_PR {:.5}{}",
            cfg.em_iterations,
            losses.l_diff,
            losses.l_pr,
            metrics.as_ref().map(|r| format!(" MAE {:.4}", r.mae)).unwrap_or_default()
        );
        state.trace.push(TraceRow {
            iteration: k,
            l_diff: losses.l_diff,
            l_pr: losses.l_pr,
            metrics,
        });
        state.imputed = imputed;
        state.iteration = k;
        if let Some(cb) = hooks.on_iteration.as_mut() {
            cb(&state)?;
        }
    }
    state.imputed = e_step(&state, &x0_obs, m, sched, cfg, rng)?;
    Ok(state)
}

/// E step on held-out rows with frozen parameters.
pub fn impute_out_of_sample<R: Rng + ?Sized>(
    state: &EmState,
    test_x0_obs: &Tensor,
    test_m: &Tensor,
    sched: &NoiseSchedule,
    cfg: &EmConfig,
    rng: &mut R,
) -> Result<Tensor> {
    if test_x0_obs.shape().len() != 2 || test_x0_obs.cols() != state.denoiser.dim() {
        return Err(Error::Shape(format!(
            "model has {} features, test data has shape {:?}",
            state.denoiser.dim(),
            test_x0_obs.shape()
        )));
    }
    e_step(state, test_x0_obs, test_m, sched, cfg, rng)
}
