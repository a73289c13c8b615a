//! Central finite differences, the reference every analytic gradient is checked against.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `(f(x + ε·eᵢ) − f(x − ε·eᵢ)) / 2ε` for every element `i` of `x`.
pub fn finite_difference_grad<T, F>(f: F, x: &Tensor<T>, eps: T) -> Result<Tensor<T>>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<T>,
{
    if !(eps > T::zero()) || !eps.is_finite() {
        return Err(Error::invalid("finite difference step must be positive"));
    }
    let base = x.to_vec();
    let two_eps = eps + eps;
    let mut grad = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut probe = base.clone();
        probe[i] = base[i] + eps;
        let up = f(&Tensor::new(x.dims(), probe.clone())?)?;
        probe[i] = base[i] - eps;
        let down = f(&Tensor::new(x.dims(), probe)?)?;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite { op: "finite_difference_grad" });
        }
        grad.push((up - down) / two_eps);
    }
    Tensor::new(x.dims(), grad)
}

/// Largest `|a − b| / max(|a|, |b|, floor)` over all elements.
pub fn max_relative_error<T: Scalar>(analytic: &Tensor<T>, numeric: &Tensor<T>, floor: T) -> T {
    assert_eq!(analytic.dims(), numeric.dims());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(T::zero(), T::max)
}
