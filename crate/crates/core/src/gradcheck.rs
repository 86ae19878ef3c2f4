//! Central finite-difference checks of tape gradients.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Agreement between analytic and numeric gradients of one input.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_abs_err: f64,
    /// `max |analytic − numeric| / max(max |numeric|, 1e-6)`.
    pub rel_err: f64,
}

/// Compares the tape gradient of the scalar `f(inputs)` with central
/// differences of step `step`, for every input.
///
/// `f` receives trainable leaves on a fresh tape. For the numeric side it is
/// re-evaluated twice per element.
pub fn check_gradients(
    f: impl Fn(&[Var<f64>]) -> Result<Var<f64>>,
    inputs: &[Tensor<f64>],
    step: f64,
) -> Result<Vec<GradCheckReport>> {
    let tape = Tape::new();
    let leaves: Vec<Var<f64>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&leaves)?;
    let grads = loss.backward()?;

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<f64>> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let y = f(&vars)?;
        if y.value().numel() != 1 {
            return Err(Error::Shape("gradient check needs a scalar function".into()));
        }
        Ok(y.item())
    };

    let mut reports = Vec::with_capacity(inputs.len());
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = grads.wrt(leaf)?;
        let mut work: Vec<Tensor<f64>> = inputs.to_vec();
        let mut max_abs = 0.0f64;
        let mut max_num = 0.0f64;
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let fp = eval(&work)?;
            work[k].data_mut()[i] = orig - step;
            let fm = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            max_abs = max_abs.max((numeric - analytic.data()[i]).abs());
            max_num = max_num.max(numeric.abs());
        }
        reports.push(GradCheckReport { max_abs_err: max_abs, rel_err: max_abs / max_num.max(1e-6) });
    }
    Ok(reports)
}

/// Single-input form of [`check_gradients`].
pub fn check_gradient(
    f: impl Fn(&Var<f64>) -> Result<Var<f64>>,
    input: &Tensor<f64>,
    step: f64,
) -> Result<GradCheckReport> {
    let r = check_gradients(|v| f(&v[0]), std::slice::from_ref(input), step)?;
    Ok(r[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_gradient_matches() {
        let x = Tensor::new(&[3], vec![0.3, -1.2, 2.0]).unwrap();
        let r = check_gradient(|v| Ok(v.powf(3.0).add(&v.exp())?.sum()), &x, 1e-5).unwrap();
        assert!(r.rel_err < 1e-8, "{r:?}");
    }
}
