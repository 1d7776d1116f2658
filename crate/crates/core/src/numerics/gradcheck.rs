//! Central finite-difference gradient checking.
//!
//! The numeric side only evaluates forward values, so it is independent of
//! the tape's adjoint rules.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Relative error per input tensor.
    pub relative_errors: Vec<f64>,
    pub max_relative_error: f64,
    pub parameter_count: usize,
}

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖)`. When both norms are
/// below 1e-10 the absolute difference is returned instead.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-10 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Compare tape gradients of `f` against central differences with step `h`.
/// Every input is registered as a leaf in order.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let analytic = tape.gradients_for(out, &vars)?;

    let mut relative_errors = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        relative_errors.push(relative_error(analytic[k].data(), &numeric));
    }
    let max_relative_error = relative_errors.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        relative_errors,
        max_relative_error,
        parameter_count: inputs.iter().map(Tensor::len).sum(),
    })
}
