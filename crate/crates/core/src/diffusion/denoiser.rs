//! Conditional X0-prediction network.
//!
//! Input layout per row: `[√ᾱ_t·x_t ⊙ (1 − cond) (D) | x0_obs ⊙ cond (D) | cond (D) | emb(t) (E)]`.
//!
//! The noisy channel is fed as `√ᾱ_t·x_t`, the posterior mean of a
//! unit-variance `x0` given `x_t` alone, so a unit weight is already a good
//! low-noise predictor and the channel fades out as `t → T`. Conditioned
//! entries arrive through the observation block only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::numerics::{Activation, ForwardCache, Gradients, Init, Mlp, OutputActivation, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            embed_dim: 64,
            activation: Activation::Silu,
        }
    }
}

/// Sinusoidal embedding: `[sin(t·f_0..f_{h-1}), cos(t·f_0..f_{h-1})]`
/// with `f_i = 10000^(-i/h)` and `h = width / 2`.
pub fn timestep_embedding(t: usize, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    net: Mlp,
    dim: usize,
    embed_dim: usize,
}

/// Conditioning block of the first layer, computed once per reverse chain.
#[derive(Debug, Clone)]
pub struct PreparedCondition {
    first_layer: Tensor,
    /// `1 − cond_mask`: where the noisy channel is fed.
    free: Tensor,
}

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(dim: usize, cfg: &DenoiserConfig, init: Init, rng: &mut R) -> Result<Self> {
        if !cfg.embed_dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument("embedding width must be even".into()));
        }
        let mut dims = vec![3 * dim + cfg.embed_dim];
        dims.extend(&cfg.hidden);
        dims.push(dim);
        let net = Mlp::new(&dims, cfg.activation, OutputActivation::Identity, init, rng)?;
        Ok(Self {
            net,
            dim,
            embed_dim: cfg.embed_dim,
        })
    }

    pub fn from_net(net: Mlp, dim: usize, embed_dim: usize) -> Result<Self> {
        if net.input_dim() != 3 * dim + embed_dim || net.output_dim() != dim {
            return Err(Error::Shape(format!(
                "denoiser network {:?} does not fit D={dim}, E={embed_dim}",
                net.layer_dims()
            )));
        }
        if net.output_activation() != OutputActivation::Identity {
            return Err(Error::InvalidArgument("denoiser output must be identity".into()));
        }
        Ok(Self { net, dim, embed_dim })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn check(&self, t: &Tensor, what: &str) -> Result<()> {
        if t.shape().len() != 2 || t.cols() != self.dim {
            return Err(Error::Shape(format!(
                "{what}: expected [n × {}], got {:?}",
                self.dim,
                t.shape()
            )));
        }
        Ok(())
    }

    /// Full network input with one step per row.
    pub fn assemble_input(
        &self,
        x_t: &Tensor,
        obs_masked: &Tensor,
        cond_mask: &Tensor,
        steps: &[usize],
        sched: &NoiseSchedule,
    ) -> Result<Tensor> {
        self.check(x_t, "x_t")?;
        x_t.ensure_same_shape(obs_masked, "x_t vs observations")?;
        x_t.ensure_same_shape(cond_mask, "x_t vs mask")?;
        if steps.len() != x_t.rows() {
            return Err(Error::Shape("one diffusion step per row required".into()));
        }
        let n = x_t.rows();
        let width = 3 * self.dim + self.embed_dim;
        let mut v = Vec::with_capacity(n * width);
        for (i, &t) in steps.iter().enumerate() {
            sched.check_step(t)?;
            let k = sched.alpha_bar(t).sqrt();
            v.extend(x_t.row(i).iter().zip(cond_mask.row(i)).map(|(x, c)| k * x * (1.0 - c)));
            v.extend_from_slice(obs_masked.row(i));
            v.extend_from_slice(cond_mask.row(i));
            v.extend(timestep_embedding(t, self.embed_dim));
        }
        Tensor::matrix(n, width, v)
    }

    pub fn prepare(&self, obs_masked: &Tensor, cond_mask: &Tensor) -> Result<PreparedCondition> {
        self.check(obs_masked, "observations")?;
        obs_masked.ensure_same_shape(cond_mask, "observations vs mask")?;
        let both = Tensor::hcat(&[obs_masked, cond_mask])?;
        Ok(PreparedCondition {
            first_layer: self.net.first_layer_partial(&both, self.dim)?,
            free: cond_mask.map(|c| 1.0 - c),
        })
    }

    /// Forward pass at a step shared by all rows, reusing the conditioning
    /// block. The cache supports input gradients with respect to `x_t`.
    pub fn forward_step(&self, x_t: &Tensor, t: usize, cond: &PreparedCondition, sched: &NoiseSchedule) -> Result<ForwardCache> {
        self.check(x_t, "x_t")?;
        sched.check_step(t)?;
        let k = sched.alpha_bar(t).sqrt();
        if cond.first_layer.rows() != x_t.rows() {
            return Err(Error::Shape("prepared condition row count differs".into()));
        }
        let emb = Tensor::matrix(1, self.embed_dim, timestep_embedding(t, self.embed_dim))?;
        let mut time_term = self.net.first_layer_partial(&emb, 3 * self.dim)?;
        for (v, b) in time_term.values_mut().iter_mut().zip(self.net.layers()[0].bias.values()) {
            *v += b;
        }
        let mut z = self.net.first_layer_partial(&x_t.zip_map(&cond.free, |x, f| k * x * f)?, 0)?;
        for i in 0..z.rows() {
            for ((v, c), tt) in z
                .row_mut(i)
                .iter_mut()
                .zip(cond.first_layer.row(i))
                .zip(time_term.values())
            {
                *v += c + tt;
            }
        }
        Ok(self.net.forward_from_preact(z))
    }

    /// Gradient of `Σ upstream ⊙ f(x_t)` with respect to `x_t`, for a cache
    /// from [`Self::forward_step`] at the same `t` and `cond`.
    pub fn input_grad_xt(
        &self,
        cache: &ForwardCache,
        cond: &PreparedCondition,
        t: usize,
        sched: &NoiseSchedule,
        upstream: &Tensor,
    ) -> Result<Tensor> {
        let k = sched.alpha_bar(t).sqrt();
        self.net.backward_input_cols(cache, upstream, 0..self.dim)?.zip_map(&cond.free, |g, f| k * g * f)
    }

    /// Training forward/backward with per-row steps.
    pub(crate) fn forward_train(&self, input: &Tensor) -> Result<ForwardCache> {
        self.net.forward_cached(input)
    }

    pub(crate) fn backward_train(&self, cache: &ForwardCache, upstream: &Tensor) -> Result<Gradients> {
        let mut g = self.net.backward(cache, upstream)?;
        g.input = None;
        Ok(g)
    }
}

/// Raw network prediction `f_θ(x_t, t; x0_obs)` over all entries.
pub fn denoise(
    denoiser: &Denoiser,
    x_t: &Tensor,
    t: usize,
    obs_masked: &Tensor,
    cond_mask: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    x_t.ensure_same_shape(obs_masked, "x_t vs observations")?;
    let cond = denoiser.prepare(obs_masked, cond_mask)?;
    Ok(denoiser.forward_step(x_t, t, &cond, sched)?.into_output())
}
