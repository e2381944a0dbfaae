use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonRow {
    pub horizon: usize,
    pub mse: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCka {
    pub layer: usize,
    pub ts: f64,
    pub plm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tag: String,
    pub dataset: String,
    pub config_hash: String,
    pub rows: Vec<HorizonRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cka: Option<Vec<LayerCka>>,
    /// Mean Pearson map of predicted windows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corr_pred: Option<Vec<Vec<f64>>>,
    /// Mean Pearson map of true future windows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corr_true: Option<Vec<Vec<f64>>>,
}

pub fn matrix_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

impl EvalReport {
    pub fn new(tag: &str, dataset: &str, config_hash: &str) -> Self {
        Self {
            tag: tag.into(),
            dataset: dataset.into(),
            config_hash: config_hash.into(),
            rows: Vec::new(),
            cka: None,
            corr_pred: None,
            corr_true: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.iter().any(|r| !r.mse.is_finite() || !r.mae.is_finite()) {
            return Err(Error::Numeric(format!("report {} has non-finite metrics", self.tag)));
        }
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// One row per horizon: `tag,dataset,horizon,mse,mae,config_hash`.
    pub fn write_csv(reports: &[EvalReport], path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["tag", "dataset", "horizon", "mse", "mae", "config_hash"])?;
        for r in reports {
            for row in &r.rows {
                w.write_record([
                    r.tag.clone(),
                    r.dataset.clone(),
                    row.horizon.to_string(),
                    format!("{:.6}", row.mse),
                    format!("{:.6}", row.mae),
                    r.config_hash.clone(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Writes a matrix as headerless CSV.
pub fn write_matrix(m: &[Vec<f64>], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for row in m {
        w.write_record(row.iter().map(|v| format!("{v:.6}")))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip() {
        let mut r = EvalReport::new("full", "ETTh1", "abc");
        r.rows.push(HorizonRow {
            horizon: 96,
            mse: 0.4,
            mae: 0.42,
        });
        r.corr_pred = Some(vec![vec![1.0, 0.5], vec![0.5, 1.0]]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        r.write_json(&p).unwrap();
        assert_eq!(EvalReport::read_json(&p).unwrap(), r);
        EvalReport::write_csv(&[r.clone()], &dir.path().join("r.csv")).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn non_finite_rejected() {
        let mut r = EvalReport::new("x", "d", "h");
        r.rows.push(HorizonRow {
            horizon: 1,
            mse: f64::NAN,
            mae: 0.0,
        });
        assert!(r.validate().is_err());
    }
}
