//! Central finite differences, used as the oracle for [`super::Graph::backward`].

use super::Tensor;
use crate::error::{Error, Result};

/// Magnitude below which gradients are compared absolutely rather than
/// relatively.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Central-difference gradient of `f` at each coordinate of each tensor in
/// `params`: `(f(p+ε) − f(p−ε)) / 2ε`.
///
/// `f` must be deterministic. Parameters are restored after every probe.
pub fn finite_diff_grad<F>(mut f: F, params: &mut [Tensor<f64>], eps: f64) -> Result<Vec<Tensor<f64>>>
where
    F: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    let mut out: Vec<Tensor<f64>> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut coord = 0;
    for pi in 0..params.len() {
        for j in 0..params[pi].numel() {
            let orig = params[pi].data()[j];
            params[pi].data_mut()[j] = orig + eps;
            let up = f(params)?;
            params[pi].data_mut()[j] = orig - eps;
            let down = f(params)?;
            params[pi].data_mut()[j] = orig;
            for value in [up, down] {
                if !value.is_finite() {
                    return Err(Error::Evaluation { coord, value });
                }
            }
            out[pi].data_mut()[j] = (up - down) / (2.0 * eps);
            coord += 1;
        }
    }
    Ok(out)
}

/// `|a − n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Largest [`relative_error`] over matching elements.
pub fn max_relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}
