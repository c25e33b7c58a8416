//! Gradient verification by central finite differences.
//!
//! Double precision only: single precision drowns the O(h²) truncation error
//! in rounding noise and the comparison stops meaning anything.

use super::{backward, Tape, Tensor};

/// Step size for central differences. With f64 and O(1) inputs this balances
/// truncation (~h²) against cancellation (~eps/h) at ~1e-8 absolute error.
pub const FD_STEP: f64 = 1e-4;

/// Default acceptance threshold for [`finite_diff_check`] reports.
pub const FD_TOL: f64 = 1e-4;

/// Outcome of one gradient check.
#[derive(Debug)]
pub struct FdReport {
    /// Largest relative error over all inputs and elements.
    pub max_rel_err: f64,
    /// Name of the input holding the worst element.
    pub worst_input: String,
    /// Flat element index of the worst element.
    pub worst_index: usize,
    /// Analytic and numeric gradient at the worst element.
    pub analytic: f64,
    pub numeric: f64,
}

impl FdReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compare analytic gradients of `f` against central finite differences.
///
/// `f` maps the given inputs to a scalar loss. It is called once with tracked
/// tensors (analytic pass) and then twice per input element with perturbed
/// untracked tensors, so keep the inputs small.
///
/// The relative error denominator is floored by a fraction of the largest
/// gradient magnitude seen, so near-zero entries of an otherwise healthy
/// gradient don't blow up the report.
pub fn finite_diff_check<F>(f: F, inputs: &[(&str, Tensor<f64>)]) -> FdReport
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    // analytic gradients
    let tape = Tape::new();
    let tracked: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.tracked(&tape)).collect();
    let loss = f(&tracked);
    backward(&loss, tape).expect("finite_diff_check: backward failed");
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|(_, t)| t.take_grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    // numeric gradients, one central difference per element
    let mut numeric: Vec<Vec<f64>> = Vec::with_capacity(inputs.len());
    for (i, (_, t)) in inputs.iter().enumerate() {
        let mut grad = vec![0.0; t.numel()];
        for (j, g) in grad.iter_mut().enumerate() {
            let eval = |delta: f64| {
                let args: Vec<Tensor<f64>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, (_, orig))| {
                        if k == i {
                            let mut data = orig.data().to_vec();
                            data[j] += delta;
                            Tensor::new(orig.shape().to_vec(), data)
                        } else {
                            orig.detached()
                        }
                    })
                    .collect();
                f(&args).item()
            };
            *g = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
        }
        numeric.push(grad);
    }

    let gmax = analytic
        .iter()
        .chain(&numeric)
        .flatten()
        .fold(0.0f64, |m, &v| m.max(v.abs()));
    let floor = (1e-3 * gmax).max(1e-10);

    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_input: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for ((name, _), (ga, gn)) in inputs.iter().zip(analytic.iter().zip(&numeric)) {
        for (j, (&a, &n)) in ga.iter().zip(gn).enumerate() {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_input = name.to_string();
                report.worst_index = j;
                report.analytic = a;
                report.numeric = n;
            }
        }
    }
    report
}
