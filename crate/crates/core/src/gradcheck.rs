//! Central-difference gradient verification.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Compares reverse-mode gradients of a scalar function with central
/// differences and returns `max_i |a_i - n_i| / max(|a_i|, |n_i|, 1e-8)`.
///
/// `f` receives a fresh graph and the input leaf and must return a scalar
/// node; it is re-run for every perturbed coordinate.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: T) -> Result<T>
where
    T: Real,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    if !(eps > T::zero()) {
        return Err(Error::invalid("grad_check", "eps must be positive"));
    }
    let mut graph = Graph::new();
    let leaf = graph.param(x.clone());
    let root = f(&mut graph, leaf)?;
    graph.backward(root)?;
    let analytic = graph.grad(leaf);

    let eval = |probe: Tensor<T>| -> Result<T> {
        let mut g = Graph::no_grad();
        let leaf = g.param(probe);
        let root = f(&mut g, leaf)?;
        g.value(root).item().ok_or(Error::NonScalarRoot { shape: g.shape(root).to_vec() })
    };

    let floor = T::of(1e-8);
    let mut worst = T::zero();
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (eps + eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        if !err.is_finite() {
            return Err(Error::NonFinite { what: "grad_check", at: Some(i) });
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches() {
        let x = Tensor::from_f64(&[5], &[0.3, -1.7, 2.2, 0.9, -0.4]).unwrap();
        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::<f64>::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(|g, _| Ok(g.constant(Tensor::scalar(4.0))), &x, 1e-4).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn leaky_relu_away_from_kink() {
        // every |x| > 10 * eps
        let x = Tensor::from_f64(&[6], &[0.5, -0.3, 1.2, -2.0, 0.01, -0.02]).unwrap();
        let err = grad_check(
            |g, x| {
                let y = g.leaky_relu(x, 0.1)?;
                Ok(g.sum(y))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
