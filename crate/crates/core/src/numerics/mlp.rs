//! Fully connected networks with a hand-written reverse pass.
//!
//! The graph is static (affine → activation, repeated), so the backward pass
//! walks the layer list in reverse over a [`ForwardCache`] instead of
//! recording a tape.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{gemm, MatRef, Tensor};
use crate::error::{Error, Result};

/// Logits fed to the sigmoid are clamped to `[-LOGIT_CLAMP, LOGIT_CLAMP]`.
pub const LOGIT_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Silu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)` for weights and biases.
    Uniform,
    Zeros,
}

pub fn sigmoid(z: f64) -> f64 {
    let z = z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    1.0 / (1.0 + (-z).exp())
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Silu => z / (1.0 + (-z).exp()),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Silu => "silu",
        }
    }
}

impl OutputActivation {
    fn apply(self, z: f64) -> f64 {
        match self {
            OutputActivation::Identity => z,
            OutputActivation::Sigmoid => sigmoid(z),
        }
    }

    fn derivative(self, z: f64, out: f64) -> f64 {
        match self {
            OutputActivation::Identity => 1.0,
            OutputActivation::Sigmoid => {
                if z.abs() > LOGIT_CLAMP {
                    0.0
                } else {
                    out * (1.0 - out)
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OutputActivation::Identity => "identity",
            OutputActivation::Sigmoid => "sigmoid",
        }
    }
}

/// Affine layer `y = x · W + b` with `W` stored `[d_in × d_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Linear>,
    hidden: Activation,
    output: OutputActivation,
}

/// Per-layer pre-activations and activations from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Option<Tensor>,
    pre: Vec<Tensor>,
    post: Vec<Tensor>,
}

impl ForwardCache {
    pub fn output(&self) -> &Tensor {
        self.post.last().expect("mlp has at least one layer")
    }

    pub fn into_output(mut self) -> Tensor {
        self.post.pop().expect("mlp has at least one layer")
    }

    /// Final-layer pre-activations (logits for a sigmoid head).
    pub fn logits(&self) -> &Tensor {
        self.pre.last().expect("mlp has at least one layer")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrad {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Gradients mirroring an [`Mlp`]'s parameters, plus an optional input gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LinearGrad>,
    pub input: Option<Tensor>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LinearGrad {
                    weight: Tensor::zeros(l.weight.shape()),
                    bias: Tensor::zeros(l.bias.shape()),
                })
                .collect(),
            input: None,
        }
    }

    pub fn flatten(&self) -> Tensor {
        let mut v = Vec::new();
        for l in &self.layers {
            v.extend_from_slice(l.weight.values());
            v.extend_from_slice(l.bias.values());
        }
        Tensor::vector(v)
    }

    pub fn scale_in_place(&mut self, c: f64) {
        for l in &mut self.layers {
            l.weight.values_mut().iter_mut().for_each(|v| *v *= c);
            l.bias.values_mut().iter_mut().for_each(|v| *v *= c);
        }
        if let Some(g) = &mut self.input {
            g.values_mut().iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn param_norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weight.values().iter().chain(l.bias.values()))
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

impl Mlp {
    /// Builds a network over `dims = [d_in, h_1, ..., d_out]`.
    pub fn new<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: Activation,
        output: OutputActivation,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "mlp needs at least two positive widths, got {dims:?}"
            )));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let (d_in, d_out) = (w[0], w[1]);
                match init {
                    Init::Zeros => Linear {
                        weight: Tensor::zeros(&[d_in, d_out]),
                        bias: Tensor::zeros(&[d_out]),
                    },
                    Init::Uniform => {
                        let bound = 1.0 / (d_in as f64).sqrt();
                        let weight = (0..d_in * d_out)
                            .map(|_| rng.random_range(-bound..bound))
                            .collect();
                        let bias = (0..d_out).map(|_| rng.random_range(-bound..bound)).collect();
                        Linear {
                            weight: Tensor::new(vec![d_in, d_out], weight).unwrap(),
                            bias: Tensor::vector(bias),
                        }
                    }
                }
            })
            .collect();
        Ok(Self {
            layers,
            hidden,
            output,
        })
    }

    pub fn zeros(dims: &[usize], hidden: Activation, output: OutputActivation) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "mlp needs at least two positive widths, got {dims:?}"
            )));
        }
        let layers = dims
            .windows(2)
            .map(|w| Linear {
                weight: Tensor::zeros(&[w[0], w[1]]),
                bias: Tensor::zeros(&[w[1]]),
            })
            .collect();
        Ok(Self {
            layers,
            hidden,
            output,
        })
    }

    pub fn from_layers(
        layers: Vec<Linear>,
        hidden: Activation,
        output: OutputActivation,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("mlp needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weight.shape().len() != 2 || l.bias.shape() != [l.d_out()] {
                return Err(Error::Shape(format!("layer {i} has malformed parameters")));
            }
            if i > 0 && layers[i - 1].d_out() != l.d_in() {
                return Err(Error::Shape(format!(
                    "layer {i} expects width {}, previous layer emits {}",
                    l.d_in(),
                    layers[i - 1].d_out()
                )));
            }
        }
        Ok(Self {
            layers,
            hidden,
            output,
        })
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].d_in()];
        dims.extend(self.layers.iter().map(Linear::d_out));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().d_out()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.d_in() * l.d_out() + l.d_out())
            .sum()
    }

    pub fn flat_params(&self) -> Tensor {
        let mut v = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            v.extend_from_slice(l.weight.values());
            v.extend_from_slice(l.bias.values());
        }
        Tensor::vector(v)
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weight.len();
            l.weight.values_mut().copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.values_mut().copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.shape().len() != 2 || input.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "mlp expects [n × {}], got {:?}",
                self.input_dim(),
                input.shape()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(input)?.into_output())
    }

    pub fn forward_cached(&self, input: &Tensor) -> Result<ForwardCache> {
        self.check_input(input)?;
        let n = input.rows();
        let first = &self.layers[0];
        let mut z = Tensor::zeros(&[n, first.d_out()]);
        broadcast_bias(&mut z, &first.bias);
        gemm(
            MatRef::row_major(input.values(), n, first.d_in()),
            MatRef::row_major(first.weight.values(), first.d_in(), first.d_out()),
            z.values_mut(),
            1.0,
        );
        let mut cache = self.forward_from_preact(z);
        cache.input = Some(input.clone());
        Ok(cache)
    }

    /// Contribution `input · W₀[cols, :]` of a column block of the first
    /// layer's input, with `cols = col0..col0 + input.cols()`. No bias.
    pub fn first_layer_partial(&self, input: &Tensor, col0: usize) -> Result<Tensor> {
        let first = &self.layers[0];
        let k = input.cols();
        if col0 + k > first.d_in() {
            return Err(Error::Shape(format!(
                "column block {col0}..{} exceeds input width {}",
                col0 + k,
                first.d_in()
            )));
        }
        let n = input.rows();
        let mut out = Tensor::zeros(&[n, first.d_out()]);
        gemm(
            MatRef::row_major(input.values(), n, k),
            MatRef::block(first.weight.values(), first.d_out(), col0, 0, k, first.d_out()),
            out.values_mut(),
            0.0,
        );
        Ok(out)
    }

    /// Resumes a forward pass from an already assembled first-layer
    /// pre-activation (bias included). The cache carries no input, so only
    /// input gradients can be taken from it.
    pub fn forward_from_preact(&self, z0: Tensor) -> ForwardCache {
        let n = z0.rows();
        let depth = self.layers.len();
        let mut pre = Vec::with_capacity(depth);
        let mut post = Vec::with_capacity(depth);
        let mut z = z0;
        for li in 0..depth {
            let last = li + 1 == depth;
            let a = if last {
                z.map(|v| self.output.apply(v))
            } else {
                z.map(|v| self.hidden.apply(v))
            };
            pre.push(z);
            if !last {
                let next = &self.layers[li + 1];
                let mut zn = Tensor::zeros(&[n, next.d_out()]);
                broadcast_bias(&mut zn, &next.bias);
                gemm(
                    MatRef::row_major(a.values(), n, next.d_in()),
                    MatRef::row_major(next.weight.values(), next.d_in(), next.d_out()),
                    zn.values_mut(),
                    1.0,
                );
                post.push(a);
                z = zn;
            } else {
                post.push(a);
                break;
            }
        }
        ForwardCache {
            input: None,
            pre,
            post,
        }
    }

    /// Parameter and input gradients for an upstream gradient on the output.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Tensor) -> Result<Gradients> {
        let dz = self.output_delta(cache, upstream)?;
        self.backward_preact(cache, dz, true, Some(0..self.input_dim()))
    }

    /// Input gradient only; parameter gradients are skipped.
    pub fn backward_input(&self, cache: &ForwardCache, upstream: &Tensor) -> Result<Tensor> {
        self.backward_input_cols(cache, upstream, 0..self.input_dim())
    }

    /// Input gradient restricted to a contiguous block of input columns.
    pub fn backward_input_cols(
        &self,
        cache: &ForwardCache,
        upstream: &Tensor,
        cols: Range<usize>,
    ) -> Result<Tensor> {
        let dz = self.output_delta(cache, upstream)?;
        Ok(self
            .backward_preact(cache, dz, false, Some(cols))?
            .input
            .expect("input gradient requested"))
    }

    fn output_delta(&self, cache: &ForwardCache, upstream: &Tensor) -> Result<Tensor> {
        let out = cache.output();
        upstream.ensure_same_shape(out, "upstream gradient vs mlp output")?;
        let z = cache.logits();
        let mut dz = upstream.clone();
        for ((g, &zv), &ov) in dz.values_mut().iter_mut().zip(z.values()).zip(out.values()) {
            *g *= self.output.derivative(zv, ov);
        }
        Ok(dz)
    }

    /// Reverse pass seeded with the gradient on the final pre-activation.
    pub fn backward_preact(
        &self,
        cache: &ForwardCache,
        dz_last: Tensor,
        want_params: bool,
        input_cols: Option<Range<usize>>,
    ) -> Result<Gradients> {
        let depth = self.layers.len();
        if cache.pre.len() != depth {
            return Err(Error::Shape("forward cache does not match network".into()));
        }
        dz_last.ensure_same_shape(cache.logits(), "seed gradient vs logits")?;
        if want_params && cache.input.is_none() {
            return Err(Error::InvalidArgument(
                "parameter gradients need a cache built from the full input".into(),
            ));
        }
        let n = dz_last.rows();
        let mut layer_grads: Vec<Option<LinearGrad>> = vec![None; depth];
        let mut dz = dz_last;
        let mut input_grad = None;
        for li in (0..depth).rev() {
            let layer = &self.layers[li];
            let (d_in, d_out) = (layer.d_in(), layer.d_out());
            if want_params {
                let a_prev = if li == 0 {
                    cache.input.as_ref().unwrap()
                } else {
                    &cache.post[li - 1]
                };
                let mut dw = Tensor::zeros(&[d_in, d_out]);
                gemm(
                    MatRef::row_major(a_prev.values(), n, d_in).t(),
                    MatRef::row_major(dz.values(), n, d_out),
                    dw.values_mut(),
                    0.0,
                );
                let mut db = Tensor::zeros(&[d_out]);
                for i in 0..n {
                    for (b, &g) in db.values_mut().iter_mut().zip(dz.row(i)) {
                        *b += g;
                    }
                }
                layer_grads[li] = Some(LinearGrad {
                    weight: dw,
                    bias: db,
                });
            }
            if li == 0 {
                if let Some(cols) = &input_cols {
                    if cols.end > d_in || cols.start > cols.end {
                        return Err(Error::Shape(format!(
                            "input column range {cols:?} out of bounds for width {d_in}"
                        )));
                    }
                    let k = cols.len();
                    let mut dx = Tensor::zeros(&[n, k]);
                    gemm(
                        MatRef::row_major(dz.values(), n, d_out),
                        MatRef::block(layer.weight.values(), d_out, cols.start, 0, k, d_out).t(),
                        dx.values_mut(),
                        0.0,
                    );
                    input_grad = Some(dx);
                }
                break;
            }
            let mut da = Tensor::zeros(&[n, d_in]);
            gemm(
                MatRef::row_major(dz.values(), n, d_out),
                MatRef::row_major(layer.weight.values(), d_in, d_out).t(),
                da.values_mut(),
                0.0,
            );
            let z_prev = &cache.pre[li - 1];
            for (g, &zv) in da.values_mut().iter_mut().zip(z_prev.values()) {
                *g *= self.hidden.derivative(zv);
            }
            dz = da;
        }
        let layers = if want_params {
            layer_grads.into_iter().map(Option::unwrap).collect()
        } else {
            Vec::new()
        };
        Ok(Gradients {
            layers,
            input: input_grad,
        })
    }
}

fn broadcast_bias(z: &mut Tensor, bias: &Tensor) {
    let n = z.rows();
    for i in 0..n {
        z.row_mut(i).copy_from_slice(bias.values());
    }
}

pub fn mlp_forward(net: &Mlp, input: &Tensor) -> Result<Tensor> {
    net.forward(input)
}

/// Recompute-on-backward: runs the forward pass again, then the reverse pass.
pub fn mlp_backward(net: &Mlp, input: &Tensor, upstream_grad: &Tensor) -> Result<Gradients> {
    let cache = net.forward_cached(input)?;
    net.backward(&cache, upstream_grad)
}
