use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compares the tape gradient of a scalar function against central finite
/// differences with step `h`.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if h <= 0.0 {
        return Err(Error::Usage("finite-difference step must be positive".into()));
    }
    let eval = |point: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(point.clone());
        let out = f(&tape, v)?;
        let value = out.value();
        if value.numel() != 1 {
            return Err(Error::Usage(format!("grad_check needs a scalar function, got shape {:?}", value.shape())));
        }
        Ok(value.data()[0])
    };

    let tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = f(&tape, xv)?;
    tape.backward(out)?;
    let analytic = xv.grad().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.data()[i];
        if !numeric.is_finite() || !a.is_finite() {
            return Err(Error::NonFinite { index: i });
        }
        worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
    }
    Ok(worst)
}
