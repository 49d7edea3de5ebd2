//! Central finite differences — the independent oracle every backward rule
//! is checked against.

use std::collections::BTreeMap;

use crate::error::{NumericError, Result};
use crate::optim::ParamStore;
use crate::tensor::Tensor;

/// Central-difference gradient of `f` w.r.t. every `requires_grad`
/// coordinate: (f(p + eps) - f(p - eps)) / (2 eps).
pub fn finite_difference_grad<F>(
    f: F,
    params: &ParamStore,
    eps: f64,
) -> Result<BTreeMap<String, Tensor>>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(NumericError::invalid("finite_difference_grad", "eps must be positive"));
    }
    let mut out = BTreeMap::new();
    let mut work = params.clone();
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let p = params.get(&name)?;
        if !p.requires_grad {
            continue;
        }
        let n = p.tensor.numel();
        let mut grad = vec![0.0; n];
        for i in 0..n {
            let orig = p.tensor.data()[i];
            work.get_mut(&name)?.tensor.data_mut()[i] = orig + eps;
            let plus = f(&work)?;
            work.get_mut(&name)?.tensor.data_mut()[i] = orig - eps;
            let minus = f(&work)?;
            work.get_mut(&name)?.tensor.data_mut()[i] = orig;
            grad[i] = (plus - minus) / (2.0 * eps);
        }
        out.insert(name.clone(), Tensor::new(p.tensor.shape().to_vec(), grad)?);
    }
    Ok(out)
}

/// Largest relative error between two gradient sets, using
/// |a - b| / max(1, |a|, |b|) per coordinate.
pub fn max_relative_error(
    analytic: &BTreeMap<String, Tensor>,
    numeric: &BTreeMap<String, Tensor>,
) -> f64 {
    let mut worst: f64 = 0.0;
    for (name, a) in analytic {
        if let Some(b) = numeric.get(name) {
            for (x, y) in a.data().iter().zip(b.data()) {
                let denom = 1.0_f64.max(x.abs()).max(y.abs());
                worst = worst.max((x - y).abs() / denom);
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let mut params = ParamStore::new();
        params.insert("x", Tensor::scalar(3.0)).unwrap();
        let g = finite_difference_grad(
            |p| Ok(p.get("x")?.tensor.data()[0].powi(2)),
            &params,
            1e-5,
        )
        .unwrap();
        assert!((g["x"].data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_gives_zeros() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let g = finite_difference_grad(|_| Ok(42.0), &params, 1e-5).unwrap();
        assert_eq!(g["w"].data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn sine_at_zero() {
        let mut params = ParamStore::new();
        params.insert("x", Tensor::scalar(0.0)).unwrap();
        let g = finite_difference_grad(
            |p| Ok(p.get("x")?.tensor.data()[0].sin()),
            &params,
            1e-5,
        )
        .unwrap();
        assert!((g["x"].data()[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_non_positive_eps() {
        let params = ParamStore::new();
        assert!(finite_difference_grad(|_| Ok(0.0), &params, 0.0).is_err());
    }
}
