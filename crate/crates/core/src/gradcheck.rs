//! Central finite-difference checks of autodiff gradients.

use candle_core::{DType, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::to_f64_vec;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)`.
    pub rel_err: f64,
    pub max_abs_err: f64,
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// Compares `d f / d var` from backprop against `(f(x + h) - f(x - h)) / 2h`
/// for every element of `var`. `f` must return a scalar and may be called many times.
pub fn check(var: &Var, f: impl Fn() -> Result<Tensor>, h: f64) -> Result<GradCheck> {
    if var.dtype() != DType::F64 {
        return Err(Error::Config("gradient checks need 64-bit parameters".into()));
    }
    let loss = f()?;
    let grads = loss.backward()?;
    let analytic = match grads.get(var.as_tensor()) {
        Some(g) => to_f64_vec(g)?,
        None => vec![0.0; var.elem_count()],
    };
    let shape = var.dims().to_vec();
    let base = to_f64_vec(var.as_tensor())?;
    let scalar = |values: &[f64]| -> Result<f64> {
        var.set(&Tensor::from_vec(values.to_vec(), shape.as_slice(), var.device())?)?;
        Ok(f()?.to_scalar::<f64>()?)
    };
    let mut numeric = Vec::with_capacity(base.len());
    let mut probe = base.clone();
    for k in 0..base.len() {
        probe[k] = base[k] + h;
        let up = scalar(&probe)?;
        probe[k] = base[k] - h;
        let down = scalar(&probe)?;
        probe[k] = base[k];
        numeric.push((up - down) / (2.0 * h));
    }
    var.set(&Tensor::from_vec(base, shape.as_slice(), var.device())?)?;
    let diff = norm(analytic.iter().zip(&numeric).map(|(a, n)| a - n));
    let scale = norm(analytic.iter().copied()).max(norm(numeric.iter().copied()));
    let rel_err = if scale == 0.0 { diff } else { diff / scale };
    let max_abs_err = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    Ok(GradCheck {
        analytic,
        numeric,
        rel_err,
        max_abs_err,
    })
}
