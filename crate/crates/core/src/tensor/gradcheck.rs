//! Central finite differences.
//!
//! This is the verification oracle behind every gradient claim in the
//! crate. It only ever calls the function being checked in forward mode.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Graph, Tensor, Var};

/// Denominator guard in the relative error.
pub const REL_FLOOR: f64 = 1e-12;

/// `max_i |a_i - n_i| / (|n_i| + 1e-12)`.
pub fn max_rel_err<R: Real>(analytic: &Tensor<R>, numeric: &Tensor<R>) -> f64 {
    assert_eq!(analytic.numel(), numeric.numel(), "gradient size mismatch");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| {
            let (a, n) = (a.as_f64(), n.as_f64());
            (a - n).abs() / (n.abs() + REL_FLOOR)
        })
        .fold(0.0, f64::max)
}

/// Central-difference gradient of a scalar function of `x`.
pub fn numeric_gradient<R: Real>(
    mut f: impl FnMut(&Tensor<R>) -> Result<R>,
    x: &Tensor<R>,
    eps: R,
) -> Result<Tensor<R>> {
    if eps.as_f64().is_nan() || eps <= R::zero() {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFiniteInput(format!(
                "function is non-finite at coordinate {i} +/- eps"
            )));
        }
        out.data_mut()[i] = (up - down) / (eps + eps);
    }
    Ok(out)
}

/// Outcome of [`finite_diff_check`].
#[derive(Clone, Debug)]
pub struct GradCheck<R> {
    pub analytic: Tensor<R>,
    pub numeric: Tensor<R>,
    pub max_rel_err: f64,
}

/// Compares the tape gradient of `f` at `x` with central differences.
///
/// `f` builds a scalar on the given tape from the trainable leaf it is
/// handed.
pub fn finite_diff_check<'a, R: Real>(
    f: impl Fn(&mut Graph<'a, R>, Var) -> Result<Var>,
    x: &Tensor<R>,
    eps: R,
) -> Result<GradCheck<R>> {
    let mut g = Graph::new();
    let leaf = g.param(x.clone());
    let loss = f(&mut g, leaf)?;
    if !g.value(loss).all_finite() {
        return Err(Error::NonFiniteInput("function is non-finite at x".into()));
    }
    let analytic = g.backward(loss)?.wrt(leaf).clone();
    let numeric = numeric_gradient(
        |p| {
            let mut g = Graph::new();
            let leaf = g.constant(p.clone());
            let out = f(&mut g, leaf)?;
            Ok(g.value(out).item())
        },
        x,
        eps,
    )?;
    let max_rel_err = max_rel_err(&analytic, &numeric);
    Ok(GradCheck {
        analytic,
        numeric,
        max_rel_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::<f64>::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let chk = finite_diff_check(
            |g, x| {
                let sq = g.mul(x, x);
                Ok(g.sum(sq))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert_eq!(chk.analytic.data(), &[2.0, 4.0]);
        assert!(chk.numeric.max_abs_diff(&chk.analytic) < 1e-8);
    }

    #[test]
    fn rejects_non_finite_function() {
        let x = Tensor::<f64>::from_f64(&[1], &[0.0]).unwrap();
        let err = numeric_gradient(|p| Ok(1.0 / p.data()[0].abs().min(0.0)), &x, 1e-4).unwrap_err();
        assert!(err.is_numerical());
    }

    #[test]
    fn rejects_bad_step() {
        let x = Tensor::<f64>::zeros(&[1]);
        assert!(numeric_gradient(|_| Ok(0.0), &x, 0.0).is_err());
    }
}
