//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use prdim::diffusion::{Denoiser, DenoiserConfig};
use prdim::numerics::{Activation, Init, Tensor};
use prdim::recognizer::{PatternRecognizer, RecognizerConfig};

pub fn random_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// Binary mask with each entry observed (1) with probability `p_obs`.
pub fn random_mask<R: Rng>(rows: usize, cols: usize, p_obs: f64, rng: &mut R) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| (rng.random::<f64>() < p_obs) as u8 as f64).collect()).unwrap()
}

pub fn random_denoiser<R: Rng>(dim: usize, rng: &mut R) -> Denoiser {
    let layers = rng.random_range(1..3);
    let cfg = DenoiserConfig {
        hidden: (0..layers).map(|_| rng.random_range(3..9)).collect(),
        embed_dim: 2 * rng.random_range(1..4),
        activation: Activation::Silu,
    };
    Denoiser::new(dim, &cfg, Init::Uniform, rng).unwrap()
}

pub fn small_recognizer_cfg() -> RecognizerConfig {
    RecognizerConfig { width: Some(5), depth: 2, activation: Activation::Silu }
}

pub fn random_recognizer<R: Rng>(dim: usize, rng: &mut R) -> PatternRecognizer {
    let cfg = RecognizerConfig {
        width: Some(rng.random_range(2..9)),
        depth: rng.random_range(1..4),
        activation: Activation::Silu,
    };
    PatternRecognizer::new(dim, &cfg, Init::Uniform, rng).unwrap()
}

pub fn bitwise_eq(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits())
}

pub fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Composite Simpson rule on `[lo, hi]` with `n` (even) intervals.
fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    let h = (hi - lo) / n as f64;
    let inner: f64 = (1..n).map(|i| f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 }).sum();
    (f(lo) + inner + f(hi)) * h / 3.0
}

/// `E[f(Z)]` for `Z ~ N(0, 1)` by quadrature.
pub fn normal_expectation(f: impl Fn(f64) -> f64) -> f64 {
    simpson(|z| f(z) * normal_pdf(z), -12.0, 12.0, 48_000)
}

pub fn normal_cdf(x: f64) -> f64 {
    simpson(normal_pdf, -12.0, x, 48_000)
}

/// `E[f(Z)]` by plain Monte Carlo.
pub fn mc_normal_expectation(f: impl Fn(f64) -> f64, n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| f(rng.sample(StandardNormal))).sum::<f64>() / n as f64
}

/// Missing probability of the latent-trait mechanism, averaged over fresh
/// draws of the row trait, the column projection and the value.
pub fn latent_oracle(k: usize, effect_scale: f64, w: f64, b: f64, n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = 1.0 / (k as f64).sqrt();
    let mut total = 0.0;
    for _ in 0..n {
        let effect: f64 = (0..k)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * sd * rng.sample::<f64, _>(StandardNormal))
            .sum();
        let x: f64 = rng.sample(StandardNormal);
        total += logistic(effect_scale * effect + w * (x - b));
    }
    total / n as f64
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// ROC-AUC by direct pair counting: fraction of (label 1, label 0) pairs
/// ranked correctly, ties counting one half.
pub fn pairwise_auc(scores: &[f64], labels: &[f64]) -> f64 {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 1.0).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 0.0).map(|(&s, _)| s).collect();
    let mut wins = 0.0;
    for &p in &pos {
        for &q in &neg {
            wins += if p > q { 1.0 } else if p == q { 0.5 } else { 0.0 };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Exact W2 between equal-size point sets by enumerating all matchings.
pub fn brute_force_w2(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.rows();
    let best = permutations(n)
        .into_iter()
        .map(|p| {
            (0..n)
                .map(|i| a.row(i).iter().zip(b.row(p[i])).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
                .sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min);
    (best / n as f64).sqrt()
}
