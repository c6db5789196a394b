//! Finite-difference gradient checker.
//!
//! Rebuilds the forward pass with perturbed parameters, so the closure must
//! be deterministic (dropout off, sampling frozen).

use super::{Tape, Tensor};

/// Per-parameter comparison of analytic vs central-difference gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Relative error with a floor so near-zero gradient pairs compare on an
/// absolute scale.
fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(0.1)
}

/// Checks the gradient of `f` (a scalar loss built on the tape from the flat
/// parameter vector) against central finite differences with the given step.
pub fn check_gradients<F>(params: &[f64], f: F, step: f64) -> GradCheckReport
where
    F: Fn(&Tape, &[f64]) -> Tensor,
{
    // Analytic pass. The closure is expected to create its parameter leaf
    // first, so it is node 0; we re-run it and read that leaf's gradient by
    // evaluating f with a probe to find the parameter tensor.
    let tape = Tape::new();
    let loss = f(&tape, params);
    tape.backward(loss);
    // The parameter leaf is the first leaf holding exactly `params`.
    let analytic = {
        let probe = Tensor {
            id: 0,
            rows: 1,
            cols: params.len(),
        };
        tape.grad(probe)
    };
    assert_eq!(
        analytic.len(),
        params.len(),
        "first tape node must be the parameter leaf"
    );

    let mut numeric = vec![0.0; params.len()];
    let mut work = params.to_vec();
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + step;
        let plus = {
            let t = Tape::new();
            let l = f(&t, &work);
            t.scalar_value(l)
        };
        work[i] = orig - step;
        let minus = {
            let t = Tape::new();
            let l = f(&t, &work);
            t.scalar_value(l)
        };
        work[i] = orig;
        numeric[i] = (plus - minus) / (2.0 * step);
    }

    let rel_errors: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| rel_error(a, n))
        .collect();
    let max_rel_error = rel_errors.iter().copied().fold(0.0, f64::max);
    GradCheckReport {
        analytic,
        numeric,
        rel_errors,
        max_rel_error,
    }
}
