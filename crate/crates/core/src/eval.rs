//! Imputation error metrics, exact 2-Wasserstein distance and ROC-AUC.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Largest point-set size accepted by [`wasserstein2_exact`].
pub const W2_MAX_POINTS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    OriginalInSample,
    OriginalOutOfSample,
    Artificial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub mae: f64,
    /// `None` when `Σ|x_true|` over the evaluated entries is zero.
    pub mre_percent: Option<f64>,
    pub eval_entry_count: usize,
    pub scope: Option<Scope>,
}

/// RMSE, MAE and MRE over entries where `eval_mask = 1`.
pub fn compute_metrics(x_true: &Tensor, x_hat: &Tensor, eval_mask: &Tensor) -> Result<MetricsReport> {
    x_true.ensure_same_shape(x_hat, "truth vs imputation")?;
    x_true.ensure_same_shape(eval_mask, "truth vs evaluation mask")?;
    let (mut sq, mut abs, mut denom, mut count) = (0.0, 0.0, 0.0, 0usize);
    for ((&t, &h), &w) in x_true.values().iter().zip(x_hat.values()).zip(eval_mask.values()) {
        if w != 0.0 && w != 1.0 {
            return Err(Error::InvalidArgument(format!("evaluation mask entry {w} is not binary")));
        }
        if w == 1.0 {
            let e = t - h;
            sq += e * e;
            abs += e.abs();
            denom += t.abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("evaluation mask selects no entries".into()));
    }
    let n = count as f64;
    let report = MetricsReport {
        rmse: (sq / n).sqrt(),
        mae: abs / n,
        mre_percent: (denom > 0.0).then(|| abs / denom * 100.0),
        eval_entry_count: count,
        scope: None,
    };
    debug_assert!(report.mae <= report.rmse * (1.0 + 1e-12) + 1e-300);
    Ok(report)
}

impl MetricsReport {
    pub fn with_scope(mut self, scope: Scope) -> Self {
        self.scope = Some(scope);
        self
    }
}

/// Minimum-cost perfect assignment on a dense square cost matrix
/// (shortest augmenting path with potentials). Returns `col_of_row`.
pub fn solve_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    let inf = f64::INFINITY;
    // 1-based arrays; index 0 is the virtual source column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0usize; n];
    for j in 1..=n {
        col_of[row_of[j] - 1] = j - 1;
    }
    col_of
}

/// `sqrt(min_π (1/n) Σ_i ‖a_i − b_π(i)‖²)` over rows of `a` and `b`.
pub fn wasserstein2_exact(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.cols() {
        return Err(Error::Shape(format!("point sets {:?} and {:?}", a.shape(), b.shape())));
    }
    let n = a.rows();
    if n != b.rows() {
        return Err(Error::InvalidArgument(format!("unequal set sizes {n} and {}", b.rows())));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("empty point sets".into()));
    }
    if n > W2_MAX_POINTS {
        return Err(Error::InvalidArgument(format!("{n} points exceeds the cap of {W2_MAX_POINTS}")));
    }
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cost[i * n + j] = a.row(i).iter().zip(b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
        }
    }
    let assign = solve_assignment(&cost, n);
    let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok((total / n as f64).max(0.0).sqrt())
}

/// Area under the ROC curve of `scores` for binary `labels`, counting ties
/// as one half. `None` when either class is absent.
pub fn roc_auc(scores: &[f64], labels: &[f64]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    let (mut pos, mut neg) = (0.0, 0.0);
    let mut rank_sum = 0.0;
    let mut k = 0;
    while k < idx.len() {
        let mut e = k;
        while e + 1 < idx.len() && scores[idx[e + 1]] == scores[idx[k]] {
            e += 1;
        }
        let mid_rank = (k + e) as f64 / 2.0 + 1.0;
        for &i in &idx[k..=e] {
            if labels[i] == 1.0 {
                pos += 1.0;
                rank_sum += mid_rank;
            } else {
                neg += 1.0;
            }
        }
        k = e + 1;
    }
    if pos == 0.0 || neg == 0.0 {
        return None;
    }
    Some((rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg))
}
