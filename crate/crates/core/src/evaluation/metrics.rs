use candle_core::DType;

use crate::config::Output;
use crate::dataset::WindowSet;
use crate::error::{shape_err, Result};
use crate::model::Model;
use crate::nn::to_f64_vec;

fn check(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(shape_err!("metric inputs of length {} and {}", pred.len(), truth.len()));
    }
    Ok(())
}

pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64)
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// Denormalized forecasts and targets for every window, each `[N * C * F]`
/// in window-major, channel-major order.
pub fn predictions(model: &Model, set: &WindowSet, output: Output, batch_size: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let dtype = model.config().precision.dtype();
    let mut preds = Vec::new();
    let mut truth = Vec::new();
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = set.batch(chunk, dtype)?;
        let out = model.forward(&batch, &crate::nn::Ctx::eval())?;
        preds.extend(to_f64_vec(out.output(output)?)?);
        truth.extend(to_f64_vec(&batch.target.unwrap().to_dtype(DType::F64)?)?);
    }
    Ok((preds, truth))
}

/// `(MSE, MAE)` of the chosen head over a window set.
pub fn evaluate_set(model: &Model, set: &WindowSet, output: Output, batch_size: usize) -> Result<(f64, f64)> {
    let (p, t) = predictions(model, set, output, batch_size)?;
    Ok((mse(&p, &t)?, mae(&p, &t)?))
}
