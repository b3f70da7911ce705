//! Central finite-difference verification of analytic gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Worst discrepancy found by [`check_gradients`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, element)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps entries whose true
/// gradient is zero from dividing rounding noise by zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    const FLOOR: f64 = 1e-6;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences with step `eps`, for every element of every input.
///
/// `f` receives a fresh graph with one differentiable leaf per input.
pub fn check_gradients<F>(inputs: &[Tensor], eps: f64, training: bool, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new(training);
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new(training);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0, checked: 0 };
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.of(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for k in 0..inputs[i].len() {
            let orig = inputs[i].data()[k];
            work[i].data_mut()[k] = orig + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[k] = orig - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[k];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report = GradCheckReport { max_rel_error: err, worst: (i, k), analytic: a, numeric, checked: report.checked };
            }
        }
    }
    Ok(report)
}
