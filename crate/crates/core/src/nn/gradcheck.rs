use super::ParamSet;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor name and flat element index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares `analytic` against central differences of `loss` at `params`.
///
/// Relative error per element is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<P, F>(params: &P, analytic: &P, loss: F, eps: f64) -> GradCheckReport
where
    P: ParamSet,
    F: Fn(&P) -> f64,
{
    let analytic_flat: Vec<Vec<f64>> = analytic.tensors().iter().map(|t| t.data.to_vec()).collect();
    let names: Vec<String> = params.tensors().into_iter().map(|t| t.name).collect();
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (ti, name) in names.iter().enumerate() {
        let len = analytic_flat[ti].len();
        for i in 0..len {
            let original = work.tensors_mut()[ti][i];
            work.tensors_mut()[ti][i] = original + eps;
            let plus = loss(&work);
            work.tensors_mut()[ti][i] = original - eps;
            let minus = loss(&work);
            work.tensors_mut()[ti][i] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic_flat[ti][i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst = Some((name.clone(), i));
            }
        }
    }
    report
}
