//! Central finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor of the relative-error denominator for an objective of unit size.
/// Central differences at `h = 1e-5` carry round-off near `1e-11 * |f|`,
/// so coordinates whose true gradient is zero are judged on absolute error
/// below this scale; [`finite_diff_check`] multiplies it by `max(1, |f|)`.
pub const REL_FLOOR: f64 = 1e-6;

/// Numerical gradient of `f` at `point` by central differences.
pub fn numeric_gradient(
    f: &mut dyn FnMut(&Tensor<f64>) -> Result<f64>,
    point: &Tensor<f64>,
    h: f64,
) -> Result<Tensor<f64>> {
    if h.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::NonFinite(format!("step h={h} must be positive")));
    }
    let mut probe = point.clone();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(point.shape().to_vec(), grad)
}

/// Worst coordinate-wise relative error
/// `|a - n| / max(REL_FLOOR, |a| + |n|)` between two gradients.
pub fn relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> Result<f64> {
    relative_error_floored(analytic, numeric, REL_FLOOR)
}

fn relative_error_floored(analytic: &Tensor<f64>, numeric: &Tensor<f64>, floor: f64) -> Result<f64> {
    if analytic.shape() != numeric.shape() {
        return Err(Error::Shape(format!(
            "gradient shapes {:?} and {:?} differ",
            analytic.shape(),
            numeric.shape()
        )));
    }
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / (a.abs() + n.abs()).max(floor))
        .fold(0.0, f64::max))
}

/// Compare `analytic` against central differences of `f` around `point`.
pub fn finite_diff_check(
    f: &mut dyn FnMut(&Tensor<f64>) -> Result<f64>,
    point: &Tensor<f64>,
    analytic: &Tensor<f64>,
    h: f64,
) -> Result<f64> {
    let scale = f(point)?.abs().max(1.0);
    let numeric = numeric_gradient(f, point, h)?;
    relative_error_floored(analytic, &numeric, REL_FLOOR * scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_sum() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 4.0]);
        let mut f = |t: &Tensor<f64>| Ok(t.sum_all());
        let err = finite_diff_check(&mut f, &x, &Tensor::ones(&[3]), 1e-5).unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn square_sum() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let mut f = |t: &Tensor<f64>| Ok(t.data().iter().map(|v| v * v).sum());
        let g = numeric_gradient(&mut f, &x, 1e-5).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8 && (g.data()[1] - 4.0).abs() < 1e-8);
        let err = finite_diff_check(&mut f, &x, &Tensor::from_vec(vec![2.0, 4.0]), 1e-5).unwrap();
        assert!(err <= 1e-9);
    }

    #[test]
    fn rejects_non_finite_and_bad_step() {
        let x = Tensor::from_vec(vec![1.0]);
        let mut f = |_: &Tensor<f64>| Ok(f64::NAN);
        assert!(matches!(numeric_gradient(&mut f, &x, 1e-5), Err(Error::NonFinite(_))));
        let mut g = |t: &Tensor<f64>| Ok(t.sum_all());
        assert!(numeric_gradient(&mut g, &x, 0.0).is_err());
    }
}
