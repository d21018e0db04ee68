use super::arch::NetworkParams;
use super::network::{forward_pass, GradientFault};
use super::train::{batch_gradients, Samples};
use super::NnError;

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|a − n| / max(|a|, |n|, 1e-6)` over all parameters.
    pub max_rel_error: f64,
    /// Flat index of the parameter reaching it.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

fn loss(params: &NetworkParams<f64>, data: &Samples<f64>) -> Result<f64, NnError> {
    let pass = forward_pass(params, &data.input())?;
    let sse: f64 = pass
        .output()
        .iter()
        .zip(data.targets())
        .map(|(y, t)| (y - t) * (y - t))
        .sum();
    Ok(sse / data.targets().len() as f64)
}

/// Checks the gradient of the mean squared error over `data` w.r.t. every
/// parameter against `(f(w + eps) − f(w − eps)) / (2 eps)`.
pub fn grad_check(params: &NetworkParams<f64>, data: &Samples<f64>, eps: f64) -> Result<GradCheckReport, NnError> {
    grad_check_with_fault(params, data, eps, None)
}

/// [`grad_check`] with an optional deliberate backward-pass fault.
pub fn grad_check_with_fault(
    params: &NetworkParams<f64>,
    data: &Samples<f64>,
    eps: f64,
    fault: Option<GradientFault>,
) -> Result<GradCheckReport, NnError> {
    if !(eps > 0.0) {
        return Err(NnError::InvalidConfig("eps must be positive".into()));
    }
    if data.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    let normalizer = data.targets().len() as f64;
    let (_, grads) = batch_gradients(params, data, normalizer, fault)?;
    let analytic: Vec<f64> = grads
        .iter()
        .flat_map(|l| l.weights.data().iter().chain(l.bias.data()).copied())
        .collect();

    let mut probe = params.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0 };
    for (i, &a) in analytic.iter().enumerate() {
        let orig = *probe.value_mut(i);
        *probe.value_mut(i) = orig + eps;
        let up = loss(&probe, data)?;
        *probe.value_mut(i) = orig - eps;
        let down = loss(&probe, data)?;
        *probe.value_mut(i) = orig;
        let n = (up - down) / (2.0 * eps);
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
        if rel > report.max_rel_error {
            report = GradCheckReport { max_rel_error: rel, worst_index: i, analytic: a, numeric: n };
        }
    }
    Ok(report)
}
