//! Central finite-difference verification of tape gradients.

use crate::error::TensorError;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of comparing analytic gradients to finite differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Per input, the relative error of every element.
    pub rel_errors: Vec<Vec<f64>>,
    /// Largest entry of `rel_errors`.
    pub max_rel_error: f64,
    /// `(input, element)` where the largest error occurred.
    pub worst: (usize, usize),
    pub rtol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.rtol
    }
}

/// Relative error `|a − n| / max(|a|, |n|, 1e-3)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Compares the gradient of the scalar `f` with respect to every element of
/// every input against central differences with step `1e-5·(1 + |x|)`.
pub fn check_gradients<F>(
    f: F,
    inputs: &[Tensor],
    rtol: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |values: &[Tensor]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.numel() != 1 {
            return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v)).collect();

    let mut probe = inputs.to_vec();
    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut max_rel_error = 0.0;
    let mut worst = (0, 0);
    for i in 0..inputs.len() {
        let mut errs = Vec::with_capacity(inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let x = inputs[i].data()[j];
            let h = 1e-5 * (1.0 + x.abs());
            probe[i].data_mut()[j] = x + h;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = x - h;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = x;
            let numeric = (plus - minus) / (2.0 * h);
            let e = relative_error(analytic[i].data()[j], numeric);
            if e > max_rel_error {
                max_rel_error = e;
                worst = (i, j);
            }
            errs.push(e);
        }
        rel_errors.push(errs);
    }
    Ok(GradCheckReport {
        rel_errors,
        max_rel_error,
        worst,
        rtol,
    })
}
