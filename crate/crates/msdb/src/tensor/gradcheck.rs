//! Central finite-difference gradient checker.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{backward, Graph, Tensor};

/// Compare the reverse-mode gradient of `f` at `x` against central finite
/// differences. Returns the max over elements of
/// `|analytic - central| / max(1e-8, |analytic| + |central|)`.
///
/// `f` must evaluate to a scalar; it is invoked on a fresh graph per call so
/// it can be any composition of tape primitives.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: T) -> Result<f64>
where
    T: Scalar,
    F: Fn(&Graph<T>, &Tensor<T>) -> Result<Tensor<T>>,
{
    if eps <= T::zero() {
        return Err(Error::InvalidArgument {
            op: "grad_check",
            reason: "eps must be positive".into(),
        });
    }

    // Analytic gradient.
    let probe = x.param_copy();
    let graph = Graph::new();
    let loss = f(&graph, &probe)?;
    if loss.len() != 1 {
        return Err(Error::NonScalarLoss {
            shape: loss.shape().to_vec(),
        });
    }
    backward(&loss, &graph)?;
    let analytic = probe.grad().unwrap_or_else(|| vec![T::zero(); x.len()]);

    // Central differences, one element at a time.
    let base = x.to_vec();
    let eval = |data: Vec<T>| -> Result<T> {
        let point = Tensor::new(x.shape(), data)?;
        let g = Graph::new();
        let out = f(&g, &point)?;
        if out.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: out.shape().to_vec(),
            });
        }
        Ok(out.item())
    };

    let mut max_rel = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] = plus[i] + eps;
        let mut minus = base.clone();
        minus[i] = minus[i] - eps;
        let numeric = (eval(plus)?.as_f64() - eval(minus)?.as_f64()) / (2.0 * eps.as_f64());
        let a = analytic[i].as_f64();
        let rel = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    #[test]
    fn sum_has_constant_gradient() {
        let x = Tensor::new(&[5], vec![0.3f64, -1.0, 2.0, 0.0, 4.5]).unwrap();
        let err = grad_check(|g, x| ops::sum_all(g, x), &x, 1e-6).unwrap();
        assert!(err < 1e-9, "max rel error {err}");
    }

    #[test]
    fn non_scalar_objective_rejected() {
        let x = Tensor::new(&[3], vec![1.0f64, 2.0, 3.0]).unwrap();
        let res = grad_check(|g, x| ops::mul(g, x, x), &x, 1e-6);
        assert!(matches!(res, Err(Error::NonScalarLoss { .. })));
    }
}
