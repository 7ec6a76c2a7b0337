//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{Tape, Tensor, Var};

/// `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Max relative error between the tape gradient of `f` at `at` and central
/// differences with step `eps`, over every element.
pub fn grad_check<T, F>(f: F, at: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..at.numel()).collect();
    grad_check_at(f, at, eps, &all)
}

/// [`grad_check`] restricted to the listed element indices.
pub fn grad_check_at<T, F>(f: F, at: &Tensor<T>, eps: f64, indices: &[usize]) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("grad_check eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(at.clone());
    let y = f(&mut tape, x)?;
    let analytic = tape
        .backward(y)?
        .wrt(x)
        .unwrap_or_else(|| Tensor::zeros(at.shape().to_vec()))
        .to_f64_vec();

    let eval = |point: Tensor<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(point);
        let y = f(&mut tape, x)?;
        Ok(tape.value(y).item().to_f64().unwrap_or(f64::NAN))
    };
    let mut worst = 0.0f64;
    for &i in indices {
        let base = at.data()[i].to_f64().unwrap_or(f64::NAN);
        let plus = eval(at.with_value(i, T::lit(base + eps)))?;
        let minus = eval(at.with_value(i, T::lit(base - eps)))?;
        // Step actually realized in T, which differs from 2·eps in f32.
        let h = T::lit(base + eps).to_f64().unwrap() - T::lit(base - eps).to_f64().unwrap();
        let numeric = (plus - minus) / h;
        let err = relative_error(analytic[i], numeric);
        if err.is_nan() {
            return Ok(f64::INFINITY);
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn constant_gradient_is_exact() {
        let mut rng = Rng::new(1);
        let x = Tensor::<f64>::randn([7], 1.0, &mut rng);
        let err = grad_check(|tp, x| tp.sum_all(x), &x, 1e-3).unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn tanh_sum_within_tolerance() {
        let mut rng = Rng::new(2);
        let x = Tensor::<f64>::randn([10], 1.0, &mut rng);
        let err = grad_check(
            |tp, x| {
                let y = tp.tanh(x)?;
                tp.sum_all(y)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn detects_wrong_backward() {
        let mut rng = Rng::new(3);
        let x = Tensor::<f64>::randn([5], 1.0, &mut rng);
        let err = grad_check(
            |tp, x| {
                tp.inject_fault("tanh");
                let y = tp.tanh(x)?;
                tp.sum_all(y)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err > 0.1, "{err}");
    }

    #[test]
    fn rejects_non_positive_eps() {
        let x = Tensor::<f64>::zeros([1]);
        assert!(grad_check(|tp, x| tp.sum_all(x), &x, 0.0).is_err());
    }
}
