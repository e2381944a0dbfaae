//! End-to-end run steps shared by the CLI, the ablation harness and the FFI:
//! data preparation, model construction, training, evaluation and analyses.

use candle_core::DType;
use ndarray::Array2;

use crate::channel_text::{compose_descriptions, compute_channel_stats, read_semantic_file, ChannelDescriptions};
use crate::config::{DataConfig, Output, RunConfig};
use crate::dataset::{few_shot_subset, load_table, make_windows, split, IngestConfig, RawSeries, Scaler, WindowSet};
use crate::error::{Error, Result};
use crate::evaluation::cka::linear_cka;
use crate::evaluation::metrics::{mae, mse, predictions};
use crate::evaluation::pearson::{mean_corr_map, pearson_corr_map};
use crate::model::Model;
use crate::nn::{to_f64_vec, Ctx};
use crate::synthetic::generate;
use crate::training::{capped, fit, FitResult};

#[derive(Debug, Clone)]
pub struct PreparedData {
    pub channel_names: Vec<String>,
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
    /// Training windows before any few-shot reduction.
    pub full_train_windows: usize,
    pub descriptions: ChannelDescriptions,
    pub scaler: Option<Scaler>,
}

pub fn load_series(cfg: &DataConfig) -> Result<RawSeries> {
    match (&cfg.synthetic, &cfg.path) {
        (Some(spec), _) => generate(spec),
        (None, Some(path)) => load_table(
            path,
            &IngestConfig {
                missing: cfg.missing,
                frequency: Some(cfg.frequency.clone()),
            },
        ),
        (None, None) => Err(Error::Config("data needs `path` or `synthetic`".into())),
    }
}

/// Splits, windows and channel descriptions for a run.
pub fn prepare(cfg: &RunConfig) -> Result<PreparedData> {
    let series = load_series(&cfg.data)?;
    prepare_series(cfg, &series)
}

pub fn prepare_series(cfg: &RunConfig, series: &RawSeries) -> Result<PreparedData> {
    let (t, f) = (cfg.model.input_len, cfg.model.horizon);
    let splits = split(series, &cfg.data.split, t + f)?;
    let scaler = cfg.data.standardize.then(|| Scaler::fit(&splits.train));
    let scaled = |s: &RawSeries| match &scaler {
        Some(sc) => sc.transform(s),
        None => s.clone(),
    };
    let stride = cfg.data.window_stride;
    let train_full = make_windows(&scaled(&splits.train), t, f, stride)?;
    let val = make_windows(&scaled(&splits.val), t, f, stride)?;
    let test = make_windows(&scaled(&splits.test), t, f, stride)?;
    let full_train_windows = train_full.len();
    let train = match cfg.data.few_shot {
        Some(fraction) => few_shot_subset(&train_full, fraction, cfg.train.seed, cfg.data.few_shot_mode)?,
        None => train_full,
    };
    let records = match &cfg.data.descriptions {
        Some(path) => read_semantic_file(path)?,
        None => Vec::new(),
    };
    let stats = compute_channel_stats(&splits.train);
    let mut descriptions = compose_descriptions(&records, &series.channel_names, &stats)?;
    descriptions.apply_quality(cfg.data.text_quality, cfg.train.seed);
    Ok(PreparedData {
        channel_names: series.channel_names.clone(),
        train,
        val,
        test,
        full_train_windows,
        descriptions,
        scaler,
    })
}

pub fn build_model(cfg: &RunConfig, data: &PreparedData) -> Result<Model> {
    Model::new(
        &cfg.model,
        &cfg.backbone,
        &data.channel_names,
        Some(&data.descriptions),
        cfg.train.seed,
    )
}

pub struct TrainedRun {
    pub model: Model,
    pub fit: FitResult,
    pub data: PreparedData,
}

pub fn train(cfg: &RunConfig) -> Result<TrainedRun> {
    cfg.validate()?;
    let data = prepare(cfg)?;
    let model = build_model(cfg, &data)?;
    let fit = fit(&model, &data.train, &data.val, &cfg.train)?;
    Ok(TrainedRun { model, fit, data })
}

/// Test-set MSE and MAE of the configured output head.
pub fn test_metrics(model: &Model, test: &WindowSet, batch_size: usize) -> Result<(f64, f64)> {
    let (p, t) = predictions(model, test, model.config().output, batch_size)?;
    Ok((mse(&p, &t)?, mae(&p, &t)?))
}

/// Average Pearson maps of predicted and true future windows.
pub fn correlation_maps(model: &Model, test: &WindowSet, output: Output, batch_size: usize) -> Result<(Array2<f64>, Array2<f64>)> {
    let (p, t) = predictions(model, test, output, batch_size)?;
    let (c, f) = (test.channels(), test.horizon());
    let maps = |v: &[f64]| -> Vec<Array2<f64>> {
        v.chunks(c * f)
            .map(|w| pearson_corr_map(&Array2::from_shape_vec((c, f), w.to_vec()).unwrap()))
            .collect()
    };
    let pred = mean_corr_map(&maps(&p)).ok_or_else(|| Error::Config("empty test set".into()))?;
    let truth = mean_corr_map(&maps(&t)).unwrap();
    Ok((pred, truth))
}

/// Linear CKA per depth between flattened layer features and the flattened raw
/// input windows. Returns `(ts, plm)` values per depth.
pub fn cka_by_layer(model: &Model, test: &WindowSet, max_windows: usize) -> Result<Vec<(f64, Option<f64>)>> {
    let set = capped(test, Some(max_windows));
    let n = set.len();
    let idx: Vec<usize> = (0..n).collect();
    let depth = model.depth();
    let mut ts_feats: Vec<Vec<f64>> = vec![Vec::new(); depth];
    let mut plm_feats: Vec<Vec<f64>> = vec![Vec::new(); depth];
    let mut inputs = Vec::new();
    for chunk in idx.chunks(32) {
        let batch = set.batch(chunk, model.config().precision.dtype())?;
        let out = model.forward(&batch, &Ctx::eval())?;
        for (i, z) in out.z_cross().iter().enumerate() {
            ts_feats[i].extend(to_f64_vec(z)?);
        }
        if let Some(trace) = &out.plm {
            for (i, l) in trace.layers.iter().enumerate() {
                plm_feats[i].extend(to_f64_vec(&l.z_plm)?);
            }
        }
        for &k in chunk {
            inputs.extend(set.input(k));
        }
    }
    let as_matrix = |v: Vec<f64>| {
        let d = v.len() / n;
        Array2::from_shape_vec((n, d), v).map_err(|e| Error::Shape(e.to_string()))
    };
    let x = as_matrix(inputs)?;
    let mut out = Vec::with_capacity(depth);
    for i in 0..depth {
        let ts = linear_cka(&as_matrix(std::mem::take(&mut ts_feats[i]))?, &x)?;
        let plm = if plm_feats[i].is_empty() {
            None
        } else {
            Some(linear_cka(&as_matrix(std::mem::take(&mut plm_feats[i]))?, &x)?)
        };
        out.push((ts, plm));
    }
    Ok(out)
}

/// Forecast of raw windows (`C x T`, channel-major each) as `[N, C, F]` values.
pub fn forecast(model: &Model, windows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let batch = crate::dataset::Batch::from_raw(windows, model.channels(), model.config().precision.dtype())?;
    to_f64_vec(&model.predict(&batch)?.to_dtype(DType::F64)?)
}
