//! Central finite-difference verification of tape gradients.

use super::tape::{grad, Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Largest relative discrepancy found by [`check_gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, element index) of the worst element.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Denominator floor of [`relative_error`]. Central differences of an O(1)
/// loss carry roughly 1e-11 of roundoff, so gradients below this floor are
/// effectively compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

/// Relative error with denominator `max(|a|, |b|, REL_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of `loss_fn` with central differences of
/// step `h` for every element of every parameter.
pub fn check_gradients<F>(params: &[Tensor<f64>], h: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (_, analytic) = grad(params, &loss_fn)?;
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let loss = loss_fn(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (pi, p) in params.iter().enumerate() {
        for ei in 0..p.len() {
            let orig = p.data()[ei];
            work[pi].data_mut()[ei] = orig + h;
            let up = eval(&work)?;
            work[pi].data_mut()[ei] = orig - h;
            let down = eval(&work)?;
            work[pi].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi].data()[ei];
            let rel = relative_error(a, numeric);
            report.checked += 1;
            if rel > report.max_rel_error || report.checked == 1 {
                report.max_rel_error = rel;
                report.worst = (pi, ei);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
