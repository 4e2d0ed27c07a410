use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of `f` at `point` against central finite
/// differences and returns the largest per-coordinate relative error, with
/// denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, point: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(Error::domain("grad_check", "epsilon must be positive"));
    }
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let root = f(&mut tape, x)?;
    let value = tape.value(root).item();
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    let analytic = tape.backward(root)?.get(&tape, x);

    let eval = |p: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.constant(p);
        let root = f(&mut t, x)?;
        let v = t.value(root).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite { op: "grad_check" })
        }
    };

    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += epsilon;
        let mut minus = point.clone();
        minus.data_mut()[i] -= epsilon;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * epsilon);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_matches_closed_form() {
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let err = grad_check(|t, x| {
            let sq = t.mul(x, x)?;
            t.sum(sq)
        }, &x, 1e-5)
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn rejects_non_positive_epsilon() {
        let x = Tensor::vector(vec![1.0]);
        assert!(grad_check(|t, x| t.sum(x), &x, 0.0).is_err());
    }

    #[test]
    fn rejects_non_finite_function() {
        let x = Tensor::vector(vec![800.0]);
        assert!(grad_check(|t, x| {
            let e = t.exp(x)?;
            t.sum(e)
        }, &x, 1e-5)
        .is_err());
    }
}
