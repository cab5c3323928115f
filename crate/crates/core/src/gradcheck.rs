//! Central finite-difference checks for tape gradients.
//!
//! The numeric side never touches a backward rule: it rebuilds the forward
//! pass on a fresh tape with every input held constant and perturbs one
//! scalar at a time.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Denominator floor of the relative error, so near-zero gradients are
/// compared on an absolute scale.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst elementwise relative error per input.
    pub per_input: Vec<f64>,
    /// `(input, element, analytic, numeric)` of the worst element overall.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub evaluations: usize,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }
}

/// Scalar value of `build` with every input as a constant.
pub fn evaluate<F>(build: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    Ok(tape.value(out).sum())
}

/// Gradient of `build` w.r.t. every input by central differences.
pub fn numeric_gradients<F>(build: &F, inputs: &[Tensor], step: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape().to_vec());
        for e in 0..inputs[i].numel() {
            let orig = inputs[i].data()[e];
            work[i].data_mut()[e] = orig + step;
            let plus = evaluate(build, &work)?;
            work[i].data_mut()[e] = orig - step;
            let minus = evaluate(build, &work)?;
            work[i].data_mut()[e] = orig;
            g.data_mut()[e] = (plus - minus) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

/// Gradient of `build` w.r.t. every input by one backward sweep.
pub fn analytic_gradients<F>(build: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let loss = if tape.value(out).is_scalar() {
        out
    } else {
        tape.sum(out)?
    };
    let grads = tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t))
        .collect())
}

/// Compares analytic and numeric gradients of `sum(build(inputs))`.
pub fn check<F>(build: F, inputs: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&build, inputs)?;
    let numeric = numeric_gradients(&build, inputs, step)?;
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut worst: Option<(usize, usize, f64, f64)> = None;
    let mut worst_err = -1.0;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let mut input_max: f64 = 0.0;
        for (e, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            let err = relative_error(av, nv);
            input_max = input_max.max(err);
            if err > worst_err {
                worst_err = err;
                worst = Some((i, e, av, nv));
            }
        }
        per_input.push(input_max);
    }
    let evaluations = 2 * inputs.iter().map(Tensor::numel).sum::<usize>();
    Ok(GradCheckReport {
        per_input,
        worst,
        evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_floor_for_tiny_values() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn quadratic_passes() {
        let x = Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap();
        let report = check(
            |tape, v| {
                let sq = tape.mul(v[0], v[0])?;
                tape.sum(sq)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error() < 1e-8, "{report:?}");
    }
}
