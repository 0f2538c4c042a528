use super::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over coordinates of `|analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    /// Coordinates where either estimate was NaN.
    pub nan_coords: Vec<usize>,
}

/// Compares `analytic` with central differences of `objective` at `point`.
pub fn finite_diff_check<F>(mut objective: F, point: &Tensor, analytic: &Tensor, h: f64) -> GradCheckReport
where
    F: FnMut(&Tensor) -> f64,
{
    assert_eq!(point.len(), analytic.len(), "gradient length");
    let mut probe = point.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        nan_coords: Vec::new(),
    };
    for i in 0..point.len() {
        let x = point.values()[i];
        probe.values_mut()[i] = x + h;
        let up = objective(&probe);
        probe.values_mut()[i] = x - h;
        let down = objective(&probe);
        probe.values_mut()[i] = x;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.values()[i];
        if numeric.is_nan() || a.is_nan() {
            report.nan_coords.push(i);
            continue;
        }
        let err = (a - numeric).abs() / a.abs().max(1.0);
        if err > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst_index = Some(i);
        }
    }
    report
}
