//! Error measures used to compare reconstructions.

use nalgebra::DVector;

use crate::error::{check_len, Error, Result};
use crate::linops::LinearOperator;

/// `‖estimate − truth‖ / ‖truth‖`.
pub fn rre(estimate: &DVector<f64>, truth: &DVector<f64>) -> Result<f64> {
    check_len("RRE estimate", truth.len(), estimate.len())?;
    let scale = truth.norm();
    if scale == 0.0 {
        return Err(Error::Domain("relative error against a zero image".into()));
    }
    Ok((estimate - truth).norm() / scale)
}

/// Per-frame RRE and its mean.
pub fn rre_series(estimates: &[DVector<f64>], truth: &[DVector<f64>]) -> Result<(Vec<f64>, f64)> {
    check_len("RRE frame count", truth.len(), estimates.len())?;
    let v = estimates
        .iter()
        .zip(truth)
        .enumerate()
        .map(|(i, (e, t))| rre(e, t).map_err(|err| err.context(format!("frame {i}"))))
        .collect::<Result<Vec<_>>>()?;
    let mean = if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok((v, mean))
}

/// Realised noise level `‖y − H x‖ / ‖H x‖`.
pub fn noise_level(y: &DVector<f64>, h: &LinearOperator, x_true: &DVector<f64>) -> Result<f64> {
    let hx = h.apply(x_true)?;
    check_len("sinogram", hx.len(), y.len())?;
    let scale = hx.norm();
    if scale == 0.0 {
        return Err(Error::Domain("noise level of a zero signal".into()));
    }
    Ok((y - hx).norm() / scale)
}
