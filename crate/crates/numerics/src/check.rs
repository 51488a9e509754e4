//! Finite-difference verification of tape gradients.

use crate::error::{NumericsError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compare the tape gradient of `f` at `point` with central differences.
///
/// Returns the largest per-coordinate `|analytic - numeric| / max(|analytic|, 1e-8)`.
/// `f` receives a fresh exact-precision tape and the input variable and must
/// return a scalar.
pub fn finite_diff_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(NumericsError::InvalidArgument(format!(
            "step must be positive, got {step}"
        )));
    }
    let mut tape = Tape::new();
    let x = tape.parameter(point.clone());
    let y = f(&mut tape, x)?;
    let grads = tape.backward(y)?;
    let id = tape.param_id(x).expect("input registered as parameter");
    let analytic = grads.get(id).expect("gradient for input").data().to_vec();

    let eval = |p: Tensor, coordinate: usize| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.parameter(p);
        let y = f(&mut tape, x)?;
        let v = tape.value(y)?.item()?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(NumericsError::NonFinite { coordinate })
        }
    };

    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = point.data().to_vec();
        let mut minus = plus.clone();
        plus[i] += step;
        minus[i] -= step;
        let fp = eval(Tensor::new(point.shape().to_vec(), plus)?, i)?;
        let fm = eval(Tensor::new(point.shape().to_vec(), minus)?, i)?;
        let numeric = (fp - fm) / (2.0 * step);
        let err = (a - numeric).abs() / a.abs().max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
