//! Dual-branch loss, parameter grouping under the freeze policy, and the
//! training loop with validation-based early stopping.

use std::io::Write;
use std::path::Path;

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::FreezePolicy;
use crate::config::{Output, TrainConfig};
use crate::dataset::WindowSet;
use crate::error::{shape_err, Error, Result};
use crate::evaluation::metrics::evaluate_set;
use crate::model::Model;
use crate::nn::{Ctx, HasParams, UpdateRule};

#[derive(Debug, Clone)]
pub struct LossParts {
    pub total: Tensor,
    pub plm: Option<Tensor>,
    pub ts: Tensor,
}

fn l1(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(shape_err!("prediction {:?} vs target {:?}", pred.dims(), target.dims()));
    }
    Ok((pred - target)?.abs()?.mean_all()?)
}

/// `lambda * mean|y_plm - y| + (1 - lambda) * mean|y_ts - y|`. Without a PLM head
/// the TS term alone is used.
pub fn total_loss(y_plm: Option<&Tensor>, y_ts: &Tensor, y: &Tensor, lambda: f64) -> Result<LossParts> {
    let ts = l1(y_ts, y)?;
    match y_plm {
        Some(p) => {
            let plm = l1(p, y)?;
            let total = ((&plm * lambda)? + (&ts * (1.0 - lambda))?)?;
            Ok(LossParts {
                total,
                plm: Some(plm),
                ts,
            })
        }
        None => Ok(LossParts {
            total: ts.clone(),
            plm: None,
            ts,
        }),
    }
}

/// Partition of every model tensor by how training treats it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterGroups {
    /// Updated by the optimizer.
    pub trainable: Vec<String>,
    /// Frozen backbone weights.
    pub frozen: Vec<String>,
    /// Updated by a model rule (the correlation extractor).
    pub persistent: Vec<String>,
    /// Fixed buffers (text embeddings).
    pub buffers: Vec<String>,
}

/// Applies `policy` and classifies every parameter; fails if anything outside
/// the pretrained side ends up frozen or a tensor is left unclassified.
pub fn build_parameter_groups(model: &Model, policy: &FreezePolicy) -> Result<ParameterGroups> {
    model.apply_freeze(policy)?;
    let pretrained: std::collections::HashSet<&str> = model.pretrained_side().iter().map(|p| p.name()).collect();
    let mut g = ParameterGroups::default();
    let all = model.params();
    for p in &all {
        let name = p.name().to_string();
        match (p.rule(), p.is_trainable()) {
            (UpdateRule::Gradient, true) => g.trainable.push(name),
            (UpdateRule::Gradient, false) if pretrained.contains(p.name()) => g.frozen.push(name),
            (UpdateRule::Gradient, false) => {
                return Err(Error::Policy(format!("{name} is frozen but not a backbone weight")));
            }
            (UpdateRule::Persistent, _) => g.persistent.push(name),
            (UpdateRule::Constant, _) => g.buffers.push(name),
        }
    }
    let total = g.trainable.len() + g.frozen.len() + g.persistent.len() + g.buffers.len();
    if total != all.len() {
        return Err(Error::Policy(format!("{} of {} parameters classified", total, all.len())));
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub val_mae: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub history: Vec<EpochRecord>,
    /// Total loss of every optimizer step.
    pub step_losses: Vec<f64>,
    pub steps: usize,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub stopped_early: bool,
    pub groups: ParameterGroups,
}

/// Evenly spaced subset of at most `cap` windows.
pub fn capped(set: &WindowSet, cap: Option<usize>) -> WindowSet {
    match cap {
        Some(cap) if cap > 0 && set.len() > cap => {
            let idx: Vec<usize> = (0..cap).map(|k| k * set.len() / cap).collect();
            set.subset(&idx)
        }
        _ => set.clone(),
    }
}

/// Trains `model` in place. The parameters with the best validation MSE of the
/// TS forecast are restored before returning.
pub fn fit(model: &Model, train: &WindowSet, val: &WindowSet, cfg: &TrainConfig) -> Result<FitResult> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    let groups = build_parameter_groups(model, &cfg.freeze)?;
    let params = model.params();
    let vars: Vec<_> = params.iter().filter(|p| p.takes_gradient()).map(|p| p.var().clone()).collect();
    let mut opt = AdamW::new(
        vars,
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..ParamsAdamW::default()
        },
    )?;
    let dtype = model.config().precision.dtype();
    let val = capped(val, cfg.max_val_windows);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::new();
    let mut step_losses = Vec::new();
    let mut steps = 0usize;
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    let mut since_best = 0usize;
    let mut stopped_early = false;
    'epochs: for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        let mut out_of_steps = false;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                out_of_steps = true;
                break;
            }
            let batch = train.batch(chunk, dtype)?;
            let ctx = Ctx::train(cfg.dropout, cfg.seed.wrapping_add(steps as u64 + 1));
            let out = model.forward(&batch, &ctx)?;
            let target = batch.target.as_ref().unwrap();
            let parts = total_loss(out.y_plm.as_ref(), &out.y_ts, target, cfg.lambda)?;
            let total = parts.total.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            let ts = parts.ts.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            let plm = match &parts.plm {
                Some(p) => Some(p.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?),
                None => None,
            };
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    total,
                    plm,
                    ts,
                });
            }
            let grads = parts.total.backward()?;
            opt.step(&grads)?;
            model.update_extractor(&out)?;
            steps += 1;
            step_losses.push(total);
            epoch_loss += total;
            batches += 1;
        }
        if batches == 0 {
            break;
        }
        let (val_mse, val_mae) = evaluate_set(model, &val, Output::Ts, cfg.batch_size.max(64))?;
        log::info!(
            "epoch {epoch}: train_loss={:.6} val_mse={val_mse:.6} val_mae={val_mae:.6} steps={steps}",
            epoch_loss / batches as f64
        );
        history.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / batches as f64,
            val_mse,
            val_mae,
        });
        if best.as_ref().is_none_or(|(m, _, _)| val_mse < *m) {
            let snapshot = params
                .iter()
                .map(|p| p.var().as_detached_tensor().copy())
                .collect::<candle_core::Result<Vec<_>>>()?;
            best = Some((val_mse, epoch, snapshot));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience.max(1) {
                stopped_early = true;
                break 'epochs;
            }
        }
        if out_of_steps || cfg.max_steps.is_some_and(|m| steps >= m) {
            break;
        }
    }
    let (best_val_mse, best_epoch, snapshot) = best.ok_or_else(|| Error::Config("no training step ran".into()))?;
    for (p, t) in params.iter().zip(snapshot) {
        if p.rule() != UpdateRule::Constant {
            p.set(&t)?;
        }
    }
    Ok(FitResult {
        history,
        step_losses,
        steps,
        best_epoch,
        best_val_mse,
        stopped_early,
        groups,
    })
}

pub fn write_history(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_loss", "val_mse", "val_mae"])?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            format!("{:.10e}", r.train_loss),
            format!("{:.10e}", r.val_mse),
            format!("{:.10e}", r.val_mae),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Appends one line to a run log.
pub fn log_line(path: &Path, line: &str) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor_from;
    use candle_core::DType;

    fn t(v: Vec<f64>) -> Tensor {
        let n = v.len();
        tensor_from(v, &[1, 1, n], DType::F64).unwrap()
    }

    fn scalar(x: &Tensor) -> f64 {
        x.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn weighted_l1() {
        let y = t(vec![0.0, 0.0]);
        let plm = t(vec![1.0, -1.0]);
        let ts = t(vec![0.5, 0.5]);
        let parts = total_loss(Some(&plm), &ts, &y, 0.6).unwrap();
        assert!((scalar(&parts.total) - 0.8).abs() < 1e-12);
        let perfect = total_loss(Some(&y), &y, &y, 0.6).unwrap();
        assert_eq!(scalar(&perfect.total), 0.0);
    }

    #[test]
    fn loss_symmetry() {
        let y = t(vec![0.3, -0.2, 1.0]);
        let a = t(vec![0.1, 0.4, 0.0]);
        let b = t(vec![-1.0, 0.2, 2.0]);
        let l1 = scalar(&total_loss(Some(&a), &b, &y, 0.3).unwrap().total);
        let l2 = scalar(&total_loss(Some(&b), &a, &y, 0.7).unwrap().total);
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn lambda_zero_ignores_plm() {
        let y = t(vec![0.0, 1.0]);
        let plm = candle_core::Var::from_tensor(&t(vec![3.0, 3.0])).unwrap();
        let ts = t(vec![0.5, 0.5]);
        let parts = total_loss(Some(plm.as_tensor()), &ts, &y, 0.0).unwrap();
        let grads = parts.total.backward().unwrap();
        if let Some(g) = grads.get(plm.as_tensor()) {
            assert!(g.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn history_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        let rows = vec![EpochRecord {
            epoch: 1,
            train_loss: 0.5,
            val_mse: 0.25,
            val_mae: 0.4,
        }];
        write_history(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,train_loss,val_mse,val_mae\n1,"));
    }
}
