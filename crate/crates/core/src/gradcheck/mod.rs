//! Central finite-difference gradient checking.
//!
//! The numeric side evaluates the scalar function on fresh tapes with every
//! input recorded as a constant, so it never touches the backward rules it
//! is checking.

mod suite;

pub use suite::{run_suite, SuiteEntry, SuiteScale, MODEL_TOL, OP_TOL};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradient magnitudes below this are compared on an absolute scale:
/// `err = |analytic − numeric| / max(|analytic|, |numeric|, REL_FLOOR)`.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub label: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub entries_checked: usize,
    /// `(input index, flat element index)` of the worst entry.
    pub worst: (usize, usize),
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares autodiff gradients of `f` with respect to every entry of every
/// tensor in `inputs` against central differences with the given `step`.
pub fn check_gradients<F>(label: impl Into<String>, inputs: &[Tensor], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        if !out.with_value(|t| t.is_scalar()) {
            return Err(Error::Contract("gradient check needs a scalar function".into()));
        }
        Ok(out.item())
    };

    let mut report = GradCheckReport {
        label: label.into(),
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        entries_checked: 0,
        worst: (0, 0),
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        for k in 0..input.numel() {
            let orig = input.data()[k];
            work[which].data_mut()[k] = orig + step;
            let up = eval(&work)?;
            work[which].data_mut()[k] = orig - step;
            let down = eval(&work)?;
            work[which].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[which].data()[k];
            let rel = relative_error(a, numeric);
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error || report.entries_checked == 0 {
                report.max_rel_error = rel;
                report.worst = (which, k);
            }
            report.entries_checked += 1;
        }
    }
    Ok(report)
}
