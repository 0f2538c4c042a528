//! Missing-pattern recognizer: per-entry observation probabilities
//! `p(m = 1 | x)`, its BCE loss and the input gradient used for guidance.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    optimizer_step, Activation, ForwardCache, Init, Mlp, OptimizerState, OutputActivation, Tensor, LOGIT_CLAMP,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecognizerConfig {
    /// Hidden width; `None` uses `min(512, 8·D)`.
    pub width: Option<usize>,
    pub depth: usize,
    pub activation: Activation,
}

impl Default for RecognizerConfig {
    fn default() -> Self {
        Self {
            width: None,
            depth: 3,
            activation: Activation::Silu,
        }
    }
}

impl RecognizerConfig {
    pub fn hidden_width(&self, dim: usize) -> usize {
        self.width.unwrap_or_else(|| (8 * dim).min(512))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatternRecognizer {
    net: Mlp,
}

impl PatternRecognizer {
    pub fn new<R: Rng + ?Sized>(dim: usize, cfg: &RecognizerConfig, init: Init, rng: &mut R) -> Result<Self> {
        let dims = Self::dims(dim, cfg);
        Self::from_net(Mlp::new(&dims, cfg.activation, OutputActivation::Sigmoid, init, rng)?)
    }

    /// All weights and biases zero: predicts 0.5 everywhere.
    pub fn zeros(dim: usize, cfg: &RecognizerConfig) -> Result<Self> {
        let dims = Self::dims(dim, cfg);
        Self::from_net(Mlp::zeros(&dims, cfg.activation, OutputActivation::Sigmoid)?)
    }

    fn dims(dim: usize, cfg: &RecognizerConfig) -> Vec<usize> {
        let w = cfg.hidden_width(dim);
        let mut dims = vec![dim];
        dims.extend(std::iter::repeat_n(w, cfg.depth));
        dims.push(dim);
        dims
    }

    pub fn from_net(net: Mlp) -> Result<Self> {
        if net.input_dim() != net.output_dim() {
            return Err(Error::Shape(format!(
                "recognizer must map D to D, got {:?}",
                net.layer_dims()
            )));
        }
        if net.output_activation() != OutputActivation::Sigmoid {
            return Err(Error::InvalidArgument("recognizer output must be sigmoid".into()));
        }
        Ok(Self { net })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn dim(&self) -> usize {
        self.net.input_dim()
    }

    /// True when every parameter is exactly zero.
    pub fn is_zero(&self) -> bool {
        self.net
            .layers()
            .iter()
            .all(|l| l.weight.values().iter().chain(l.bias.values()).all(|&v| v == 0.0))
    }

    fn check(&self, x0: &Tensor) -> Result<()> {
        if x0.shape().len() != 2 || x0.cols() != self.dim() {
            return Err(Error::Shape(format!(
                "recognizer expects [n × {}], got {:?}",
                self.dim(),
                x0.shape()
            )));
        }
        Ok(())
    }
}

pub fn pr_predict(pr: &PatternRecognizer, x0: &Tensor) -> Result<Tensor> {
    pr.check(x0)?;
    pr.net.forward(x0)
}

/// BCE of one entry from its (unclamped) logit, using the clamped sigmoid.
fn entry_bce(z: f64, m: f64) -> f64 {
    let z = z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    // log σ(z) = −softplus(−z), log(1 − σ(z)) = −softplus(z)
    let softplus = |v: f64| if v > 0.0 { v + (-v).exp().ln_1p() } else { v.exp().ln_1p() };
    m * softplus(-z) + (1.0 - m) * softplus(z)
}

fn forward_checked(pr: &PatternRecognizer, m: &Tensor, x0: &Tensor) -> Result<ForwardCache> {
    pr.check(x0)?;
    x0.ensure_same_shape(m, "recognizer input vs mask")?;
    pr.net.forward_cached(x0)
}

fn mean_bce(cache: &ForwardCache, m: &Tensor) -> f64 {
    let z = cache.logits();
    if z.is_empty() {
        return 0.0;
    }
    let total: f64 = z.values().iter().zip(m.values()).map(|(&z, &m)| entry_bce(z, m)).sum();
    total / z.len() as f64
}

/// Logit-space seed `(p − m) / count`, zero where the logit clamp is active.
fn logit_seed(cache: &ForwardCache, m: &Tensor, count: f64) -> Tensor {
    let z = cache.logits();
    let p = cache.output();
    let mut dz = Tensor::zeros(z.shape());
    for (((g, &zv), &pv), &mv) in dz.values_mut().iter_mut().zip(z.values()).zip(p.values()).zip(m.values()) {
        if zv.abs() < LOGIT_CLAMP {
            *g = (pv - mv) / count;
        }
    }
    dz
}

/// Mean per-entry BCE over all entries.
pub fn pr_loss(m: &Tensor, x0: &Tensor, pr: &PatternRecognizer) -> Result<f64> {
    let cache = forward_checked(pr, m, x0)?;
    Ok(mean_bce(&cache, m))
}

/// Gradient of [`pr_loss`] with respect to `x0`.
pub fn pr_input_grad(m: &Tensor, x0: &Tensor, pr: &PatternRecognizer) -> Result<Tensor> {
    let cache = forward_checked(pr, m, x0)?;
    let count = (x0.len() as f64).max(1.0);
    input_grad_from_cache(pr, &cache, m, count)
}

/// Per-row guidance gradient: each row gets the gradient of its own mean
/// BCE, i.e. `n ·` [`pr_input_grad`]. Independent of how rows are batched.
pub fn pr_row_input_grad(m: &Tensor, x0: &Tensor, pr: &PatternRecognizer) -> Result<Tensor> {
    let cache = forward_checked(pr, m, x0)?;
    let count = (x0.cols() as f64).max(1.0);
    input_grad_from_cache(pr, &cache, m, count)
}

fn input_grad_from_cache(pr: &PatternRecognizer, cache: &ForwardCache, m: &Tensor, count: f64) -> Result<Tensor> {
    let dz = logit_seed(cache, m, count);
    Ok(pr
        .net
        .backward_preact(cache, dz, false, Some(0..pr.dim()))?
        .input
        .expect("input gradient requested"))
}

/// One optimizer step on [`pr_loss`]; returns the loss before the step.
pub fn pr_train_step(
    pr: &mut PatternRecognizer,
    m: &Tensor,
    x0: &Tensor,
    lr: f64,
    opt: &mut OptimizerState,
) -> Result<f64> {
    let cache = forward_checked(pr, m, x0)?;
    let loss = mean_bce(&cache, m);
    let count = (x0.len() as f64).max(1.0);
    let dz = logit_seed(&cache, m, count);
    let grads = pr.net.backward_preact(&cache, dz, true, None)?;
    optimizer_step(&mut pr.net, &grads, opt, lr)?;
    Ok(loss)
}
