//! Reverse chain with observed-entry overwrite and an optional guidance hook.
//!
//! Per step: predict `X̂₀`, overwrite observed entries, apply guidance to the
//! missing entries, then re-noise `X_{t−1} = √ᾱ_{t−1} X̂₀ + √(1−ᾱ_{t−1}) ε`.
//! With `ᾱ₀ = 1` the last step returns `X̂₀` itself.
//!
//! Rows are processed in fixed-size chunks, each row drawing from its own
//! RNG stream, so results do not depend on the thread count.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::denoiser::{Denoiser, PreparedCondition};
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::numerics::{ForwardCache, Tensor};
use crate::seed::row_rng;

pub const SAMPLER_CHUNK: usize = 128;

/// State visible to a guidance hook at one reverse step.
pub struct StepContext<'a> {
    pub t: usize,
    pub sched: &'a NoiseSchedule,
    pub denoiser: &'a Denoiser,
    /// Denoiser forward cache at `(x_t, t)`; supports `∂/∂x_t`.
    pub cache: &'a ForwardCache,
    pub cond: &'a PreparedCondition,
    pub mask: &'a Tensor,
}

pub trait Guidance: Sync {
    /// Correction subtracted from `x0_hat` on missing coordinates, or `None`
    /// to leave it untouched.
    fn correction(&self, ctx: &StepContext<'_>, x0_hat: &Tensor) -> Result<Option<Tensor>>;
}

fn check_inputs(denoiser: &Denoiser, x0_obs: &Tensor, m: &Tensor) -> Result<()> {
    x0_obs.ensure_same_shape(m, "observations vs mask")?;
    if x0_obs.shape().len() != 2 || x0_obs.cols() != denoiser.dim() {
        return Err(Error::Shape(format!(
            "sampler expects [n × {}], got {:?}",
            denoiser.dim(),
            x0_obs.shape()
        )));
    }
    Ok(())
}

/// Runs the reverse chain for all rows. `base_seed` determines every row's
/// noise stream.
pub fn reverse_chain(
    denoiser: &Denoiser,
    x0_obs: &Tensor,
    m: &Tensor,
    sched: &NoiseSchedule,
    base_seed: u64,
    guidance: Option<&dyn Guidance>,
) -> Result<Tensor> {
    check_inputs(denoiser, x0_obs, m)?;
    let n = x0_obs.rows();
    let d = x0_obs.cols();
    let starts: Vec<usize> = (0..n).step_by(SAMPLER_CHUNK).collect();
    let chunks: Vec<Result<Tensor>> = starts
        .par_iter()
        .map(|&start| {
            let idx: Vec<usize> = (start..(start + SAMPLER_CHUNK).min(n)).collect();
            chain_chunk(
                denoiser,
                &x0_obs.select_rows(&idx),
                &m.select_rows(&idx),
                sched,
                base_seed,
                start,
                guidance,
            )
        })
        .collect();
    let mut out = Vec::with_capacity(n * d);
    for c in chunks {
        out.extend(c?.into_values());
    }
    Tensor::matrix(n, d, out)
}

fn chain_chunk(
    denoiser: &Denoiser,
    x0_obs: &Tensor,
    m: &Tensor,
    sched: &NoiseSchedule,
    base_seed: u64,
    first_row: usize,
    guidance: Option<&dyn Guidance>,
) -> Result<Tensor> {
    let rows = x0_obs.rows();
    let mut rngs: Vec<_> = (0..rows).map(|i| row_rng(base_seed, first_row + i)).collect();
    let obs_masked = x0_obs.zip_map(m, |v, mk| if mk == 1.0 { v } else { 0.0 })?;
    let cond = denoiser.prepare(&obs_masked, m)?;

    let mut x_t = Tensor::zeros(x0_obs.shape());
    for (i, rng) in rngs.iter_mut().enumerate() {
        for v in x_t.row_mut(i) {
            *v = rng.sample(StandardNormal);
        }
    }
    for t in (1..=sched.steps()).rev() {
        let cache = denoiser.forward_step(&x_t, t, &cond, sched)?;
        let mut x0_hat = cache.output().clone();
        for ((v, &o), &mk) in x0_hat.values_mut().iter_mut().zip(x0_obs.values()).zip(m.values()) {
            if mk == 1.0 {
                *v = o;
            }
        }
        if let Some(g) = guidance {
            let ctx = StepContext {
                t,
                sched,
                denoiser,
                cache: &cache,
                cond: &cond,
                mask: m,
            };
            if let Some(corr) = g.correction(&ctx, &x0_hat)? {
                corr.ensure_same_shape(&x0_hat, "guidance correction")?;
                for ((v, &c), &mk) in x0_hat.values_mut().iter_mut().zip(corr.values()).zip(m.values()) {
                    if mk == 0.0 && c != 0.0 {
                        *v -= c;
                    }
                }
            }
        }
        if !x0_hat.is_finite() {
            return Err(Error::NonFiniteStep { t });
        }
        if t == 1 {
            return Ok(x0_hat);
        }
        let ab = sched.alpha_bar(t - 1);
        let (s, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
        for (i, rng) in rngs.iter_mut().enumerate() {
            for (xv, &hv) in x_t.row_mut(i).iter_mut().zip(x0_hat.row(i)) {
                let e: f64 = rng.sample(StandardNormal);
                *xv = s * hv + noise * e;
            }
        }
    }
    unreachable!("schedule has at least one step")
}

/// Reverse chain without guidance.
pub fn sample_unguided<R: Rng + ?Sized>(
    denoiser: &Denoiser,
    x0_obs: &Tensor,
    m: &Tensor,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    let base = rng.random::<u64>();
    reverse_chain(denoiser, x0_obs, m, sched, base, None)
}
