use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for [`relative_error`]; keeps near-zero gradient
/// entries from dividing round-off by round-off.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-8;

/// |a − b| / max(|a|, |b|, floor).
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Compares the tape gradient of the scalar function `f` at `x` against
/// central differences with the given step, coordinate by coordinate, and
/// returns the largest relative error.
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let x = x.clone().with_requires_grad(true);
    let mut tape = Tape::new();
    let vx = tape.bind(&x);
    let out = f(&mut tape, vx)?;
    if tape.value(out).len() != 1 {
        return Err(Error::contract("finite-difference check needs a scalar function"));
    }
    let grads = tape.backward(out)?;
    let zeros = vec![0.0; x.len()];
    let analytic = grads.of(&x).unwrap_or(&zeros);

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.bind(probe);
        let out = f(&mut tape, v)?;
        Ok(tape.scalar(out))
    };

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}
