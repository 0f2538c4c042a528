//! First-order optimizers over [`Mlp`] parameters.

use serde::{Deserialize, Serialize};

use super::mlp::{Gradients, Mlp};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers and step counter. Buffers are allocated on first use.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    kind: OptimizerKind,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

fn check_grads(net: &Mlp, grads: &Gradients) -> Result<()> {
    if grads.layers.len() != net.layers().len() {
        return Err(Error::Shape(format!(
            "gradients cover {} layers, network has {}",
            grads.layers.len(),
            net.layers().len()
        )));
    }
    for (i, (l, g)) in net.layers().iter().zip(&grads.layers).enumerate() {
        if !l.weight.same_shape(&g.weight) || !l.bias.same_shape(&g.bias) {
            return Err(Error::Shape(format!("gradient shape mismatch in layer {i}")));
        }
        if !g.weight.is_finite() || !g.bias.is_finite() {
            return Err(Error::NonFiniteGradient { layer: i });
        }
    }
    Ok(())
}

/// Applies one update in place. Nothing is modified when an error is returned.
pub fn optimizer_step(
    net: &mut Mlp,
    grads: &Gradients,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    check_grads(net, grads)?;
    state.step += 1;
    match state.kind {
        OptimizerKind::Sgd => {
            for (l, g) in net.layers_mut().iter_mut().zip(&grads.layers) {
                for (p, d) in l.weight.values_mut().iter_mut().zip(g.weight.values()) {
                    *p -= lr * d;
                }
                for (p, d) in l.bias.values_mut().iter_mut().zip(g.bias.values()) {
                    *p -= lr * d;
                }
            }
        }
        OptimizerKind::Adam { beta1, beta2, eps } => {
            if state.first.is_empty() {
                for l in net.layers() {
                    state.first.push(vec![0.0; l.weight.len() + l.bias.len()]);
                    state.second.push(vec![0.0; l.weight.len() + l.bias.len()]);
                }
            }
            let t = state.step as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            for (li, (l, g)) in net.layers_mut().iter_mut().zip(&grads.layers).enumerate() {
                let m = &mut state.first[li];
                let v = &mut state.second[li];
                let nw = l.weight.len();
                let params = l
                    .weight
                    .values_mut()
                    .iter_mut()
                    .chain(l.bias.values_mut().iter_mut());
                let gs = g.weight.values().iter().chain(g.bias.values());
                for (k, (p, &d)) in params.zip(gs).enumerate() {
                    debug_assert!(k < nw + g.bias.len());
                    m[k] = beta1 * m[k] + (1.0 - beta1) * d;
                    v[k] = beta2 * v[k] + (1.0 - beta2) * d * d;
                    let mh = m[k] / c1;
                    let vh = v[k] / c2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}
