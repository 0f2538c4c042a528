//! Missing-mask simulators and artificial masks for pretraining.
//!
//! All generators return a mask with `1 = observed`. Larger values are more
//! likely to go missing under the logistic family:
//! `p(missing | x) = sigmoid(W · (x − b))`.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::AxisMeta;
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MechanismSpec {
    Mcar {
        p: f64,
    },
    Mar {
        driver_columns: Vec<usize>,
        slope: f64,
        offset: f64,
    },
    MnarLogistic {
        w: f64,
        b: f64,
    },
    MnarQuantile {
        q: f64,
        feature_fraction: f64,
    },
    MnarSelfCensor {
        w: f64,
        b: f64,
    },
    MnarLatent {
        latent_dim: usize,
        effect_scale: f64,
        w: f64,
        b: f64,
    },
    MnarTruncation {
        lower: f64,
        upper: f64,
    },
}

impl MechanismSpec {
    pub fn name(&self) -> &'static str {
        match self {
            MechanismSpec::Mcar { .. } => "mcar",
            MechanismSpec::Mar { .. } => "mar",
            MechanismSpec::MnarLogistic { .. } => "mnar_logistic",
            MechanismSpec::MnarQuantile { .. } => "mnar_quantile",
            MechanismSpec::MnarSelfCensor { .. } => "mnar_self_censor",
            MechanismSpec::MnarLatent { .. } => "mnar_latent",
            MechanismSpec::MnarTruncation { .. } => "mnar_truncation",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} = {v} outside [0, 1]")))
            }
        };
        let finite = |name: &str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} must be finite")))
            }
        };
        match *self {
            MechanismSpec::Mcar { p } => unit("p", p),
            MechanismSpec::Mar {
                ref driver_columns,
                slope,
                offset,
            } => {
                if driver_columns.is_empty() {
                    return Err(Error::InvalidArgument("mar needs at least one driver column".into()));
                }
                finite("slope", slope)?;
                finite("offset", offset)
            }
            MechanismSpec::MnarLogistic { w, b } | MechanismSpec::MnarSelfCensor { w, b } => {
                finite("w", w)?;
                finite("b", b)
            }
            MechanismSpec::MnarQuantile { q, feature_fraction } => {
                unit("q", q)?;
                unit("feature_fraction", feature_fraction)
            }
            MechanismSpec::MnarLatent {
                latent_dim,
                effect_scale,
                w,
                b,
            } => {
                if latent_dim == 0 {
                    return Err(Error::InvalidArgument("latent_dim must be ≥ 1".into()));
                }
                finite("effect_scale", effect_scale)?;
                finite("w", w)?;
                finite("b", b)
            }
            MechanismSpec::MnarTruncation { lower, upper } => {
                if lower.is_nan() || upper.is_nan() || lower >= upper {
                    return Err(Error::InvalidArgument(format!(
                        "truncation needs lower < upper, got [{lower}, {upper}]"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Whether the mask is random given the data (as opposed to a
    /// deterministic function of it).
    pub fn is_stochastic(&self) -> bool {
        !matches!(
            self,
            MechanismSpec::MnarQuantile { .. } | MechanismSpec::MnarTruncation { .. }
        )
    }

    pub fn generate<R: Rng + ?Sized>(&self, x: &Tensor, rng: &mut R) -> Result<MaskSample> {
        self.validate()?;
        match *self {
            MechanismSpec::Mcar { p } => Ok(gen_mcar(x.rows(), x.cols(), p, rng)),
            MechanismSpec::Mar {
                ref driver_columns,
                slope,
                offset,
            } => gen_mar(x, driver_columns, slope, offset, rng),
            MechanismSpec::MnarLogistic { w, b } => Ok(gen_mnar_logistic(x, w, b, rng)),
            MechanismSpec::MnarQuantile { q, feature_fraction } => {
                gen_mnar_quantile(x, q, feature_fraction, rng)
            }
            MechanismSpec::MnarSelfCensor { w, b } => {
                gen_mnar_subtype(MnarSubtype::SelfCensor { w, b }, x, rng)
            }
            MechanismSpec::MnarLatent {
                latent_dim,
                effect_scale,
                w,
                b,
            } => gen_mnar_subtype(
                MnarSubtype::Latent {
                    latent_dim,
                    effect_scale,
                    w,
                    b,
                },
                x,
                rng,
            ),
            MechanismSpec::MnarTruncation { lower, upper } => {
                gen_mnar_subtype(MnarSubtype::Truncation { lower, upper }, x, rng)
            }
        }
    }

    /// Mean per-entry missing probability given `x`, for mechanisms where it
    /// has a closed form. `None` for the latent-trait mechanism.
    pub fn expected_missing_ratio(&self, x: &Tensor) -> Option<f64> {
        let n = x.len() as f64;
        match *self {
            MechanismSpec::Mcar { p } => Some(p),
            MechanismSpec::MnarLogistic { w, b } | MechanismSpec::MnarSelfCensor { w, b } => {
                Some(x.values().iter().map(|&v| logistic_missing_prob(v, w, b)).sum::<f64>() / n)
            }
            MechanismSpec::Mar {
                ref driver_columns,
                slope,
                offset,
            } => {
                let mut total = 0.0;
                for i in 0..x.rows() {
                    let drive = driver_mean(x.row(i), driver_columns);
                    let p = sigmoid(slope * drive + offset);
                    total += p * (x.cols() - driver_columns.len()) as f64;
                }
                Some(total / n)
            }
            MechanismSpec::MnarTruncation { lower, upper } => Some(
                x.values().iter().filter(|&&v| v < lower || v > upper).count() as f64 / n,
            ),
            MechanismSpec::MnarQuantile { q, feature_fraction } => {
                Some(q * feature_fraction)
            }
            MechanismSpec::MnarLatent { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSample {
    pub mask: Tensor,
    pub realized_missing_ratio: f64,
}

impl MaskSample {
    pub fn from_mask(mask: Tensor) -> Self {
        let realized_missing_ratio = 1.0 - mask.mean();
        Self {
            mask,
            realized_missing_ratio,
        }
    }
}

fn logistic_missing_prob(v: f64, w: f64, b: f64) -> f64 {
    if v.is_nan() {
        1.0
    } else {
        sigmoid(w * (v - b))
    }
}

pub fn gen_mcar<R: Rng + ?Sized>(rows: usize, cols: usize, p: f64, rng: &mut R) -> MaskSample {
    let mask = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { 1.0 })
        .collect();
    MaskSample::from_mask(Tensor::matrix(rows, cols, mask).unwrap())
}

/// Entry missing with probability `sigmoid(w · (x − b))`. NaN entries are
/// always missing.
pub fn gen_mnar_logistic<R: Rng + ?Sized>(x: &Tensor, w: f64, b: f64, rng: &mut R) -> MaskSample {
    let mask = x
        .values()
        .iter()
        .map(|&v| {
            let p = logistic_missing_prob(v, w, b);
            if rng.random::<f64>() < p {
                0.0
            } else {
                1.0
            }
        })
        .collect();
    MaskSample::from_mask(Tensor::new(x.shape().to_vec(), mask).unwrap())
}

/// Linear-interpolated empirical quantile of sorted data at level `level`.
fn quantile_sorted(sorted: &[f64], level: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * level;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// A random subset of `round(feature_fraction · D)` columns; entries above
/// their column's `(1 − q)` quantile go missing.
pub fn gen_mnar_quantile<R: Rng + ?Sized>(
    x: &Tensor,
    q: f64,
    feature_fraction: f64,
    rng: &mut R,
) -> Result<MaskSample> {
    for (name, v) in [("q", q), ("feature_fraction", feature_fraction)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!("{name} = {v} outside [0, 1]")));
        }
    }
    let d = x.cols();
    let n = x.rows();
    let chosen = (feature_fraction * d as f64).round() as usize;
    if chosen == 0 || n == 0 {
        return Err(Error::InvalidArgument(format!(
            "feature_fraction {feature_fraction} selects no column out of {d}"
        )));
    }
    let mut mask = Tensor::full(x.shape(), 1.0);
    let mut cols = index::sample(rng, d, chosen).into_vec();
    cols.sort_unstable();
    for j in cols {
        let mut col: Vec<f64> = (0..n).map(|i| x.get(i, j)).filter(|v| v.is_finite()).collect();
        if col.is_empty() {
            continue;
        }
        col.sort_by(f64::total_cmp);
        let threshold = quantile_sorted(&col, 1.0 - q);
        for i in 0..n {
            let v = x.get(i, j);
            if !v.is_finite() || v > threshold {
                mask.set(i, j, 0.0);
            }
        }
    }
    Ok(MaskSample::from_mask(mask))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MnarSubtype {
    SelfCensor { w: f64, b: f64 },
    /// Per-row latent `u ~ N(0, I)`; per-column projection `v_d ~ N(0, I/latent_dim)`;
    /// logit `effect_scale · (v_d · u) + w · (x − b)`.
    Latent {
        latent_dim: usize,
        effect_scale: f64,
        w: f64,
        b: f64,
    },
    Truncation { lower: f64, upper: f64 },
}

pub fn gen_mnar_subtype<R: Rng + ?Sized>(kind: MnarSubtype, x: &Tensor, rng: &mut R) -> Result<MaskSample> {
    match kind {
        MnarSubtype::SelfCensor { w, b } => Ok(gen_mnar_logistic(x, w, b, rng)),
        MnarSubtype::Latent {
            latent_dim,
            effect_scale,
            w,
            b,
        } => {
            if latent_dim == 0 {
                return Err(Error::InvalidArgument("latent_dim must be ≥ 1".into()));
            }
            let d = x.cols();
            let scale = 1.0 / (latent_dim as f64).sqrt();
            let proj: Vec<f64> = (0..d * latent_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
                .collect();
            let mut mask = Tensor::full(x.shape(), 1.0);
            let mut u = vec![0.0; latent_dim];
            for i in 0..x.rows() {
                for ui in u.iter_mut() {
                    *ui = rng.sample(StandardNormal);
                }
                for j in 0..d {
                    let v = x.get(i, j);
                    let effect: f64 = proj[j * latent_dim..(j + 1) * latent_dim]
                        .iter()
                        .zip(&u)
                        .map(|(a, b)| a * b)
                        .sum();
                    let p = if v.is_nan() {
                        1.0
                    } else {
                        sigmoid(effect_scale * effect + w * (v - b))
                    };
                    if rng.random::<f64>() < p {
                        mask.set(i, j, 0.0);
                    }
                }
            }
            Ok(MaskSample::from_mask(mask))
        }
        MnarSubtype::Truncation { lower, upper } => {
            if lower.is_nan() || upper.is_nan() || lower >= upper {
                return Err(Error::InvalidArgument(format!(
                    "truncation needs lower < upper, got [{lower}, {upper}]"
                )));
            }
            let mask = x
                .values()
                .iter()
                .map(|&v| if v.is_nan() || v < lower || v > upper { 0.0 } else { 1.0 })
                .collect();
            Ok(MaskSample::from_mask(Tensor::new(x.shape().to_vec(), mask).unwrap()))
        }
    }
}

fn driver_mean(row: &[f64], drivers: &[usize]) -> f64 {
    drivers.iter().map(|&j| row[j]).sum::<f64>() / drivers.len() as f64
}

/// Non-driver entries missing with probability
/// `sigmoid(slope · mean(driver values of the row) + offset)`.
pub fn gen_mar<R: Rng + ?Sized>(
    x: &Tensor,
    driver_columns: &[usize],
    slope: f64,
    offset: f64,
    rng: &mut R,
) -> Result<MaskSample> {
    let d = x.cols();
    if driver_columns.is_empty() {
        return Err(Error::InvalidArgument("mar needs at least one driver column".into()));
    }
    if let Some(&bad) = driver_columns.iter().find(|&&j| j >= d) {
        return Err(Error::InvalidArgument(format!("driver column {bad} out of range")));
    }
    let mut is_driver = vec![false; d];
    for &j in driver_columns {
        is_driver[j] = true;
    }
    if is_driver.iter().all(|&b| b) {
        return Err(Error::InvalidArgument(
            "driver columns cover every column; nothing left to mask".into(),
        ));
    }
    let mut mask = Tensor::full(x.shape(), 1.0);
    for i in 0..x.rows() {
        let p = sigmoid(slope * driver_mean(x.row(i), driver_columns) + offset);
        for (j, &drv) in is_driver.iter().enumerate() {
            if !drv && rng.random::<f64>() < p {
                mask.set(i, j, 0.0);
            }
        }
    }
    Ok(MaskSample::from_mask(mask))
}

/// Artificial hold-out mask (`1 = held out`) for pretraining.
///
/// Candidates are observed entries whose temporal neighbour (same feature,
/// step ± 1) is originally missing. Up to `round(p · observed)` candidates
/// are drawn uniformly; any remaining budget is drawn uniformly from the
/// other observed entries. Without `axis_meta` the whole budget is MCAR.
pub fn gen_adjacent_artificial<R: Rng + ?Sized>(
    m: &Tensor,
    p: f64,
    axis_meta: Option<AxisMeta>,
    rng: &mut R,
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("artificial fraction {p} outside [0, 1]")));
    }
    let n = m.rows();
    let d = m.cols();
    if let Some(meta) = axis_meta {
        if meta.features * meta.steps != d {
            return Err(Error::Shape(format!(
                "axis meta {}×{} does not match {d} columns",
                meta.features, meta.steps
            )));
        }
    }
    let mut a = Tensor::zeros(m.shape());
    let observed: Vec<usize> = (0..n * d).filter(|&k| m.values()[k] == 1.0).collect();
    let budget = ((p * observed.len() as f64).round() as usize).min(observed.len());
    if budget == 0 {
        return Ok(a);
    }
    let mut candidates = Vec::new();
    if let Some(meta) = axis_meta {
        for &k in &observed {
            let (i, col) = (k / d, k % d);
            let step = col % meta.steps;
            let missing_at = |s: usize| m.get(i, col - step + s) == 0.0;
            let left = step > 0 && missing_at(step - 1);
            let right = step + 1 < meta.steps && missing_at(step + 1);
            if left || right {
                candidates.push(k);
            }
        }
    }
    candidates.shuffle(rng);
    let take = budget.min(candidates.len());
    for &k in &candidates[..take] {
        a.values_mut()[k] = 1.0;
    }
    let remaining = budget - take;
    if remaining > 0 {
        let rest: Vec<usize> = observed
            .iter()
            .copied()
            .filter(|&k| a.values()[k] == 0.0)
            .collect();
        for pick in index::sample(rng, rest.len(), remaining) {
            a.values_mut()[rest[pick]] = 1.0;
        }
    }
    Ok(a)
}
