use super::{Precision, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_GRAD_CHECK_EPS: f64 = 1e-5;

/// Compares the autodiff gradient of a scalar function against central
/// differences, always in [`Precision::Double`].
///
/// `f` receives a fresh tape and the leaf holding `x` and must return a
/// one-element result. Returns `max_i |a_i − n_i| / max(|a_i|, |n_i|, 1e-8)`.
pub fn grad_check<F>(mut f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new(Precision::Double);
    let leaf = tape.leaf(x, true)?;
    let y = f(&mut tape, leaf)?;
    if tape.value(y).len() != 1 {
        return Err(Error::Autodiff("grad_check needs a scalar-valued function".into()));
    }
    tape.backward(y)?;
    let analytic = tape
        .grad(leaf)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new(Precision::Double);
        let v = tape.leaf(t, false)?;
        let y = f(&mut tape, v)?;
        tape.item(y)
    };

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
