//! Central finite differences, the verification oracle for every analytic gradient.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Element-wise `(f(x + eps·e_i) − f(x − eps·e_i)) / (2·eps)`.
pub fn finite_diff<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("finite_diff eps must be > 0, got {eps}")));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "objective not finite around element {i}: f+ = {plus}, f- = {minus}"
            )));
        }
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

/// Finite difference of a scalar-argument function.
pub fn finite_diff_scalar<F>(mut f: F, x: f64, eps: f64) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    let g = finite_diff(|t| f(t.data()[0]), &Tensor::from_vec(vec![x]), eps)?;
    Ok(g[0])
}

/// Largest element-wise relative error, using `max(|a|, |b|, 1)` as the scale
/// so entries near zero are compared absolutely.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let g = finite_diff(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, DEFAULT_EPS).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8);
        assert!((g[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn max_abs_at_unique_max_is_one_hot() {
        let x = Tensor::from_vec(vec![0.2, -0.9, 0.5]);
        let g = finite_diff(|t| Ok(t.max_abs()), &x, DEFAULT_EPS).unwrap();
        for (got, want) in g.iter().zip([0.0, -1.0, 0.0]) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_bad_eps_and_non_finite() {
        let x = Tensor::from_vec(vec![1.0]);
        assert!(matches!(finite_diff(|_| Ok(0.0), &x, 0.0), Err(Error::Domain(_))));
        assert!(matches!(finite_diff(|_| Ok(f64::NAN), &x, 1e-5), Err(Error::Numeric(_))));
    }

    #[test]
    fn scalar_helper() {
        let g = finite_diff_scalar(|a| Ok((-a).exp()), 0.3, DEFAULT_EPS).unwrap();
        assert!((g + (-0.3f64).exp()).abs() < 1e-9);
    }
}
