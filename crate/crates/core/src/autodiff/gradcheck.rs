use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Worst elementwise relative error between reverse-mode gradients of `f` at
/// `point` and central differences with step `h`.
///
/// The relative error of each entry uses `max(|analytic|, |numeric|, 1e-8)`
/// as its denominator.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let loss = f(&mut tape, x)?;
    let analytic = tape.backward(loss)?.get_or_zeros(x);

    let eval = |p: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(p, false);
        let l = f(&mut t, v)?;
        Ok(t.value(l).item())
    };

    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
