use log::debug;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::denoiser::Denoiser;
use super::schedule::{forward_sample_rows, standard_normal, NoiseSchedule};
use crate::data::MaskedDataset;
use crate::error::{Error, Result};
use crate::missing::gen_adjacent_artificial;
use crate::numerics::{optimizer_step, Gradients, OptimizerKind, OptimizerState, Tensor};

/// Loss weight `λ(t)`; constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffLossConfig {
    pub lambda: f64,
}

impl Default for DiffLossConfig {
    fn default() -> Self {
        Self { lambda: 1.0 }
    }
}

/// Conditioning inputs for one batch.
#[derive(Debug, Clone, Copy)]
pub struct Conditioning<'a> {
    pub obs_masked: &'a Tensor,
    pub mask: &'a Tensor,
}

/// `λ · Σ((f_θ − x0) ⊙ target)² / max(1, Σ target)` and its parameter gradient.
#[allow(clippy::too_many_arguments)]
pub fn diff_loss(
    denoiser: &Denoiser,
    x0: &Tensor,
    target_mask: &Tensor,
    x_t: &Tensor,
    steps: &[usize],
    sched: &NoiseSchedule,
    cond: Conditioning<'_>,
    cfg: &DiffLossConfig,
) -> Result<(f64, Gradients)> {
    x0.ensure_same_shape(target_mask, "x0 vs target mask")?;
    x0.ensure_same_shape(x_t, "x0 vs x_t")?;
    if cfg.lambda <= 0.0 {
        return Err(Error::InvalidArgument("loss weight must be positive".into()));
    }
    let count: f64 = target_mask.sum();
    if count == 0.0 {
        return Ok((0.0, Gradients::zeros_like(denoiser.net())));
    }
    let input = denoiser.assemble_input(x_t, cond.obs_masked, cond.mask, steps, sched)?;
    let cache = denoiser.forward_train(&input)?;
    let pred = cache.output();
    let norm = count.max(1.0);
    let mut loss = 0.0;
    let mut upstream = Tensor::zeros(pred.shape());
    for (((g, &p), &x), &w) in upstream
        .values_mut()
        .iter_mut()
        .zip(pred.values())
        .zip(x0.values())
        .zip(target_mask.values())
    {
        let r = (p - x) * w;
        loss += r * r;
        *g = cfg.lambda * 2.0 * r * w / norm;
    }
    let grads = denoiser.backward_train(&cache, &upstream)?;
    Ok((cfg.lambda * loss / norm, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Phase1Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub artificial_fraction: f64,
    pub resample_per_epoch: bool,
    pub optimizer: OptimizerKind,
}

impl Default for Phase1Config {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            lr: 1e-3,
            artificial_fraction: 0.1,
            resample_per_epoch: true,
            optimizer: OptimizerKind::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phase1Outcome {
    pub denoiser: Denoiser,
    /// Mean minibatch loss per epoch.
    pub loss_trace: Vec<f64>,
}

/// Minibatch index blocks over a fresh permutation of `0..n`.
pub(crate) fn minibatches<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Conditional pretraining: targets are all observed entries, conditioning
/// excludes artificially held-out entries.
pub fn pretrain_phase1<R: Rng + ?Sized>(
    train: &MaskedDataset,
    init: Denoiser,
    cfg: &Phase1Config,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Phase1Outcome> {
    if train.rows() == 0 {
        return Err(Error::Data("pretraining set is empty".into()));
    }
    if train.cols() != init.dim() {
        return Err(Error::Shape(format!(
            "denoiser expects {} columns, data has {}",
            init.dim(),
            train.cols()
        )));
    }
    let mut denoiser = init;
    let mut opt = OptimizerState::new(cfg.optimizer);
    let loss_cfg = DiffLossConfig::default();
    let mut artificial = train.a.clone();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let resample = if epoch == 0 {
            artificial.is_none()
        } else {
            cfg.resample_per_epoch
        };
        if resample {
            artificial = Some(gen_adjacent_artificial(
                &train.m,
                cfg.artificial_fraction,
                train.axis_meta,
                rng,
            )?);
        }
        let a = artificial.as_ref().unwrap();
        let cond_mask_all = train.m.zip_map(a, |m, a| m - a)?;
        let mut total = 0.0;
        let mut batches = 0usize;
        for idx in minibatches(train.rows(), cfg.batch_size, rng) {
            let x0 = train.x.select_rows(&idx);
            let m = train.m.select_rows(&idx);
            let cm = cond_mask_all.select_rows(&idx);
            let obs = x0.zip_map(&cm, |v, c| v * c)?;
            let steps: Vec<usize> = idx.iter().map(|_| sched.sample_step(rng)).collect();
            let eps = standard_normal(x0.shape(), rng);
            let x_t = forward_sample_rows(&x0, &steps, &eps, sched);
            let (loss, grads) = diff_loss(
                &denoiser,
                &x0,
                &m,
                &x_t,
                &steps,
                sched,
                Conditioning {
                    obs_masked: &obs,
                    mask: &cm,
                },
                &loss_cfg,
            )?;
            optimizer_step(denoiser.net_mut(), &grads, &mut opt, cfg.lr)?;
            total += loss;
            batches += 1;
        }
        let mean = total / batches as f64;
        debug!("phase1 epoch {epoch}: loss {mean:.5}");
        trace.push(mean);
    }
    Ok(Phase1Outcome {
        denoiser,
        loss_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::denoiser::DenoiserConfig;
    use crate::diffusion::schedule::{build_schedule, ScheduleKind};
    use crate::numerics::{finite_diff_check, Activation, Init};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(rng: &mut ChaCha8Rng, dim: usize) -> Denoiser {
        let cfg = DenoiserConfig {
            hidden: vec![12, 10],
            embed_dim: 6,
            activation: Activation::Silu,
        };
        Denoiser::new(dim, &cfg, Init::Uniform, rng).unwrap()
    }

    #[test]
    fn zero_target_mask_is_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = tiny(&mut rng, 3);
        let x = Tensor::full(&[2, 3], 0.5);
        let z = Tensor::zeros(&[2, 3]);
        let sched = build_schedule(10, 1e-4, 0.5, ScheduleKind::Quadratic).unwrap();
        let (l, g) = diff_loss(&d, &x, &z, &x, &[1, 2], &sched, Conditioning { obs_masked: &x, mask: &z }, &DiffLossConfig::default())
            .unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g.param_norm(), 0.0);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = tiny(&mut rng, 3);
        let x0 = standard_normal(&[4, 3], &mut rng);
        let xt = standard_normal(&[4, 3], &mut rng);
        let m = Tensor::matrix(4, 3, (0..12).map(|v| ((v * 7) % 3 != 0) as u8 as f64).collect()).unwrap();
        let obs = x0.zip_map(&m, |a, b| a * b).unwrap();
        let steps = [1, 5, 9, 3];
        let cond = Conditioning { obs_masked: &obs, mask: &m };
        let cfg = DiffLossConfig::default();
        let sched = build_schedule(10, 1e-4, 0.5, ScheduleKind::Quadratic).unwrap();
        let (_, g) = diff_loss(&d, &x0, &m, &xt, &steps, &sched, cond, &cfg).unwrap();
        let rep = finite_diff_check(
            |p| {
                let mut d2 = d.clone();
                d2.net_mut().set_flat_params(p.values()).unwrap();
                diff_loss(&d2, &x0, &m, &xt, &steps, &sched, cond, &cfg).unwrap().0
            },
            &d.net().flat_params(),
            &g.flatten(),
            1e-5,
        );
        assert!(rep.max_rel_error < 1e-5, "{}", rep.max_rel_error);
    }

    #[test]
    fn zero_epochs_returns_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = tiny(&mut rng, 4);
        let ds = MaskedDataset::complete(Tensor::full(&[8, 4], 1.0)).unwrap();
        let s = build_schedule(10, 1e-4, 0.5, ScheduleKind::Quadratic).unwrap();
        let cfg = Phase1Config { epochs: 0, ..Phase1Config::default() };
        let out = pretrain_phase1(&ds, d.clone(), &cfg, &s, &mut rng).unwrap();
        assert_eq!(out.denoiser, d);
        assert!(out.loss_trace.is_empty());
    }

    #[test]
    fn empty_dataset_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = tiny(&mut rng, 4);
        let ds = MaskedDataset::complete(Tensor::zeros(&[0, 4])).unwrap();
        let s = build_schedule(10, 1e-4, 0.5, ScheduleKind::Quadratic).unwrap();
        assert!(pretrain_phase1(&ds, d, &Phase1Config::default(), &s, &mut rng).is_err());
    }
}
