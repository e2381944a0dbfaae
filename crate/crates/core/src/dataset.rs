//! Benchmark table ingestion, chronological splits, sliding windows, per-window
//! instance normalization and few-shot subsets.

use std::path::Path;
use std::sync::Arc;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor_from;

/// Floor applied to per-window standard deviations so constant channels stay finite.
pub const STD_FLOOR: f64 = 1e-5;

/// Multichannel table, `values` stored row-major (`rows × channels`).
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    values: Vec<f64>,
    rows: usize,
    pub channel_names: Vec<String>,
    pub timestamps: Vec<String>,
    pub frequency: String,
}

impl RawSeries {
    pub fn new(
        values: Vec<f64>,
        channel_names: Vec<String>,
        timestamps: Vec<String>,
        frequency: impl Into<String>,
    ) -> Result<Self> {
        let channels = channel_names.len();
        if channels == 0 {
            return Err(Error::Config("series needs at least one channel".into()));
        }
        if !values.len().is_multiple_of(channels) || values.len() / channels != timestamps.len() {
            return Err(Error::Shape(format!(
                "{} values for {channels} channels and {} timestamps",
                values.len(),
                timestamps.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::MissingValue {
                row: pos / channels,
                column: channel_names[pos % channels].clone(),
            });
        }
        Ok(Self {
            rows: timestamps.len(),
            values,
            channel_names,
            timestamps,
            frequency: frequency.into(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn value(&self, row: usize, channel: usize) -> f64 {
        self.values[row * self.channels() + channel]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.channels();
        &self.values[row * c..(row + 1) * c]
    }

    pub fn column(&self, channel: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.value(r, channel)).collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Contiguous row range `[start, start + len)`.
    pub fn slice_rows(&self, start: usize, len: usize) -> RawSeries {
        let c = self.channels();
        RawSeries {
            values: self.values[start * c..(start + len) * c].to_vec(),
            rows: len,
            channel_names: self.channel_names.clone(),
            timestamps: self.timestamps[start..start + len].to_vec(),
            frequency: self.frequency.clone(),
        }
    }

    /// Writes the ETT-style layout read by [`load_table`].
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["date".to_string()];
        header.extend(self.channel_names.iter().cloned());
        w.write_record(&header)?;
        for r in 0..self.rows {
            let mut rec = vec![self.timestamps[r].clone()];
            rec.extend(self.row(r).iter().map(|v| format!("{v}")));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    #[default]
    Reject,
    ForwardFill,
}

#[derive(Debug, Clone, Default)]
pub struct IngestConfig {
    pub missing: MissingPolicy,
    pub frequency: Option<String>,
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c.eq_ignore_ascii_case("nan") || c.eq_ignore_ascii_case("na") || c.eq_ignore_ascii_case("null")
}

/// Reads a CSV with a header row, a timestamp first column and numeric channels.
/// Row numbers in errors are 1-based file lines (the header is line 1).
pub fn load_table(path: &Path, cfg: &IngestConfig) -> Result<RawSeries> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);
    let header = reader.headers()?.clone();
    if header.len() < 2 {
        return Err(Error::MalformedRow {
            row: 1,
            message: "header needs a timestamp column and at least one channel".into(),
        });
    }
    let channel_names: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let channels = channel_names.len();
    let mut values = Vec::new();
    let mut timestamps = Vec::new();
    let mut previous: Option<Vec<f64>> = None;
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2;
        let record = record.map_err(|e| Error::MalformedRow {
            row: line,
            message: e.to_string(),
        })?;
        if record.len() != channels + 1 {
            return Err(Error::MalformedRow {
                row: line,
                message: format!("expected {} fields, found {}", channels + 1, record.len()),
            });
        }
        let mut row = Vec::with_capacity(channels);
        for (c, cell) in record.iter().skip(1).enumerate() {
            if is_missing(cell) {
                match (cfg.missing, &previous) {
                    (MissingPolicy::ForwardFill, Some(prev)) => {
                        row.push(prev[c]);
                        continue;
                    }
                    _ => {
                        return Err(Error::MissingValue {
                            row: line,
                            column: channel_names[c].clone(),
                        })
                    }
                }
            }
            let v: f64 = cell.trim().parse().map_err(|_| Error::NonNumericCell {
                row: line,
                column: channel_names[c].clone(),
                value: cell.to_string(),
            })?;
            row.push(v);
        }
        timestamps.push(record[0].to_string());
        values.extend_from_slice(&row);
        previous = Some(row);
    }
    let frequency = cfg.frequency.clone().unwrap_or_default();
    RawSeries::new(values, channel_names, timestamps, frequency)
}

/// Chronological split ratios, e.g. `6:2:2`. Weights need not be normalized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let s = Self { train, val, test };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) || parts.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!("invalid split ratios {parts:?}")));
        }
        Ok(())
    }

    /// Row counts: train and val floored, test takes the remainder.
    pub fn counts(&self, rows: usize) -> (usize, usize, usize) {
        let total = self.train + self.val + self.test;
        // The epsilon keeps exact products such as 0.6 * 14400 from flooring one short.
        let floor = |w: f64| ((rows as f64) * w / total + 1e-9).floor() as usize;
        let train = floor(self.train).min(rows);
        let val = floor(self.val).min(rows - train);
        (train, val, rows - train - val)
    }
}

pub struct Splits {
    pub train: RawSeries,
    pub val: RawSeries,
    pub test: RawSeries,
}

/// Partitions `raw` chronologically. Every split must hold at least `min_rows`
/// rows (input length plus horizon).
pub fn split(raw: &RawSeries, spec: &SplitSpec, min_rows: usize) -> Result<Splits> {
    spec.validate()?;
    let (n_train, n_val, n_test) = spec.counts(raw.rows());
    for (name, rows) in [("train", n_train), ("val", n_val), ("test", n_test)] {
        if rows < min_rows || rows == 0 {
            return Err(Error::SplitTooShort {
                split: name,
                rows,
                required: min_rows,
            });
        }
    }
    Ok(Splits {
        train: raw.slice_rows(0, n_train),
        val: raw.slice_rows(n_train, n_val),
        test: raw.slice_rows(n_train + n_val, n_test),
    })
}

/// Per-channel `(mean, std)` of one input window.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Standardizes each channel (row of a `C × T` channel-major window) to mean 0 and
/// std 1; std is floored at [`STD_FLOOR`].
pub fn instance_normalize(window: &[f64], channels: usize) -> (Vec<f64>, NormStats) {
    let t = window.len() / channels;
    let mut out = Vec::with_capacity(window.len());
    let mut mean = Vec::with_capacity(channels);
    let mut std = Vec::with_capacity(channels);
    for row in window.chunks(t) {
        let m = row.iter().sum::<f64>() / t as f64;
        let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / t as f64;
        let s = var.sqrt().max(STD_FLOOR);
        out.extend(row.iter().map(|v| (v - m) / s));
        mean.push(m);
        std.push(s);
    }
    (out, NormStats { mean, std })
}

/// Inverse of [`instance_normalize`] for a `C × F` channel-major prediction.
pub fn denormalize(pred: &[f64], stats: &NormStats) -> Vec<f64> {
    let channels = stats.mean.len();
    let f = pred.len() / channels;
    pred.chunks(f)
        .zip(stats.mean.iter().zip(&stats.std))
        .flat_map(|(row, (m, s))| row.iter().map(move |v| v * s + m))
        .collect()
}

/// Sliding `(input, target)` windows over one split. Windows are materialized on
/// demand from the shared series.
#[derive(Debug, Clone)]
pub struct WindowSet {
    series: Arc<RawSeries>,
    input_len: usize,
    horizon: usize,
    origins: Vec<usize>,
    stats: Vec<NormStats>,
}

pub fn window_count(rows: usize, input_len: usize, horizon: usize, stride: usize) -> usize {
    if rows < input_len + horizon || stride == 0 {
        0
    } else {
        (rows - input_len - horizon) / stride + 1
    }
}

pub fn make_windows(series: &RawSeries, input_len: usize, horizon: usize, stride: usize) -> Result<WindowSet> {
    if stride == 0 || input_len == 0 || horizon == 0 {
        return Err(Error::Config("input length, horizon and stride must be >= 1".into()));
    }
    let count = window_count(series.rows(), input_len, horizon, stride);
    if count == 0 {
        return Err(Error::NotEnoughRows {
            rows: series.rows(),
            required: input_len + horizon,
        });
    }
    let series = Arc::new(series.clone());
    let origins: Vec<usize> = (0..count).map(|i| i * stride).collect();
    let stats = origins
        .iter()
        .map(|&o| instance_normalize(&extract(&series, o, input_len), series.channels()).1)
        .collect();
    Ok(WindowSet {
        series,
        input_len,
        horizon,
        origins,
        stats,
    })
}

/// Channel-major `C × len` block starting at `start`.
fn extract(series: &RawSeries, start: usize, len: usize) -> Vec<f64> {
    let c = series.channels();
    let mut out = vec![0.0; c * len];
    for t in 0..len {
        for (ch, v) in series.row(start + t).iter().enumerate() {
            out[ch * len + t] = *v;
        }
    }
    out
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.series.channels()
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn origin_indices(&self) -> &[usize] {
        &self.origins
    }

    pub fn series(&self) -> &RawSeries {
        &self.series
    }

    /// Raw input window, channel-major `C × T`.
    pub fn input(&self, i: usize) -> Vec<f64> {
        extract(&self.series, self.origins[i], self.input_len)
    }

    /// Raw target immediately following the input, channel-major `C × F`.
    pub fn target(&self, i: usize) -> Vec<f64> {
        extract(&self.series, self.origins[i] + self.input_len, self.horizon)
    }

    pub fn norm_stats(&self, i: usize) -> &NormStats {
        &self.stats[i]
    }

    pub fn subset(&self, indices: &[usize]) -> WindowSet {
        WindowSet {
            series: Arc::clone(&self.series),
            input_len: self.input_len,
            horizon: self.horizon,
            origins: indices.iter().map(|&i| self.origins[i]).collect(),
            stats: indices.iter().map(|&i| self.stats[i].clone()).collect(),
        }
    }

    /// Tensors for a batch of windows.
    pub fn batch(&self, indices: &[usize], dtype: DType) -> Result<Batch> {
        let (c, t, f) = (self.channels(), self.input_len, self.horizon);
        let b = indices.len();
        let mut x = Vec::with_capacity(b * c * t);
        let mut y = Vec::with_capacity(b * c * f);
        let mut mean = Vec::with_capacity(b * c);
        let mut std = Vec::with_capacity(b * c);
        for &i in indices {
            let (norm, stats) = instance_normalize(&self.input(i), c);
            x.extend(norm);
            y.extend(self.target(i));
            mean.extend(&stats.mean);
            std.extend(&stats.std);
        }
        Ok(Batch {
            x: tensor_from(x, &[b, c, t], dtype)?,
            mean: tensor_from(mean, &[b, c, 1], dtype)?,
            std: tensor_from(std, &[b, c, 1], dtype)?,
            target: Some(tensor_from(y, &[b, c, f], dtype)?),
        })
    }
}

/// Model input: normalized windows plus the statistics needed to undo normalization.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, C, T]`, instance-normalized.
    pub x: Tensor,
    /// `[B, C, 1]`.
    pub mean: Tensor,
    /// `[B, C, 1]`.
    pub std: Tensor,
    /// Raw `[B, C, F]` targets when known.
    pub target: Option<Tensor>,
}

impl Batch {
    /// Batch of raw channel-major `C × T` windows without targets.
    pub fn from_raw(windows: &[Vec<f64>], channels: usize, dtype: DType) -> Result<Batch> {
        let b = windows.len();
        let t = windows.first().map(|w| w.len() / channels).unwrap_or(0);
        let mut x = Vec::new();
        let mut mean = Vec::new();
        let mut std = Vec::new();
        for w in windows {
            if w.len() != channels * t {
                return Err(Error::Shape(format!("window of {} values, expected {}", w.len(), channels * t)));
            }
            let (norm, stats) = instance_normalize(w, channels);
            x.extend(norm);
            mean.extend(stats.mean);
            std.extend(stats.std);
        }
        Ok(Batch {
            x: tensor_from(x, &[b, channels, t], dtype)?,
            mean: tensor_from(mean, &[b, channels, 1], dtype)?,
            std: tensor_from(std, &[b, channels, 1], dtype)?,
            target: None,
        })
    }

    pub fn size(&self) -> usize {
        self.x.dims()[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FewShotMode {
    /// Chronologically first windows of the training split.
    #[default]
    Prefix,
    /// Seeded random subset, kept in chronological order.
    Random,
}

/// Keeps `floor(fraction × |train|)` training windows.
pub fn few_shot_subset(train: &WindowSet, fraction: f64, seed: u64, mode: FewShotMode) -> Result<WindowSet> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("few-shot fraction must be in (0, 1], got {fraction}")));
    }
    let keep = ((train.len() as f64) * fraction + 1e-9).floor() as usize;
    if keep == 0 {
        return Err(Error::EmptyFewShot {
            fraction,
            windows: train.len(),
        });
    }
    let indices: Vec<usize> = match mode {
        FewShotMode::Prefix => (0..keep).collect(),
        FewShotMode::Random => {
            let mut all: Vec<usize> = (0..train.len()).collect();
            all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut chosen = all[..keep].to_vec();
            chosen.sort_unstable();
            chosen
        }
    };
    Ok(train.subset(&indices))
}

/// Global z-score scaler fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn fit(train: &RawSeries) -> Scaler {
        let n = train.rows() as f64;
        let (mean, std) = (0..train.channels())
            .map(|c| {
                let col = train.column(c);
                let m = col.iter().sum::<f64>() / n;
                let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
                (m, v.sqrt().max(STD_FLOOR))
            })
            .unzip();
        Scaler { mean, std }
    }

    pub fn transform(&self, series: &RawSeries) -> RawSeries {
        let c = series.channels();
        let values = series
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % c]) / self.std[i % c])
            .collect();
        RawSeries {
            values,
            rows: series.rows(),
            channel_names: series.channel_names.clone(),
            timestamps: series.timestamps.clone(),
            frequency: series.frequency.clone(),
        }
    }
}
