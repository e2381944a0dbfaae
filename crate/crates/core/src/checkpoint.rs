//! Checkpoints: one safetensors file holding every named parameter and buffer,
//! with the model spec, run config and config hash in its metadata.

use std::collections::HashMap;
use std::path::Path;

use candle_core::Tensor;
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::backbone::{FreezePolicy, Provenance};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::nn::DEVICE;

const META_KEY: &str = "plmcast";
const FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: u32,
    pub spec: ModelSpec,
    pub provenance: Option<Provenance>,
    pub freeze: Option<FreezePolicy>,
    pub run: Option<RunConfig>,
    pub config_hash: Option<String>,
}

pub fn save(model: &Model, run: Option<&RunConfig>, path: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        format: FORMAT,
        spec: model.spec.clone(),
        provenance: model.backbone.as_ref().map(|b| b.spec.provenance),
        freeze: run.map(|r| r.train.freeze.clone()),
        run: run.cloned(),
        config_hash: run.map(|r| r.hash()).transpose()?,
    };
    let tensors = model.named_tensors();
    let data: Vec<(String, Tensor)> = tensors.into_iter().map(|(n, t)| Ok((n, t.contiguous()?))).collect::<Result<_>>()?;
    let metadata = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&meta)?)]);
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    safetensors::serialize_to_file(data.iter().map(|(n, t)| (n.as_str(), t)), Some(metadata), path).map_err(|e| {
        Error::Load {
            what: path.display().to_string(),
            message: e.to_string(),
        }
    })
}

pub fn read_meta(bytes: &[u8], what: &str) -> Result<CheckpointMeta> {
    let err = |m: String| Error::Load {
        what: what.to_string(),
        message: m,
    };
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| err(e.to_string()))?;
    let text = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| err("no model metadata".into()))?;
    let meta: CheckpointMeta = serde_json::from_str(text)?;
    if meta.format != FORMAT {
        return Err(err(format!("unsupported checkpoint format {}", meta.format)));
    }
    Ok(meta)
}

pub fn load(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let what = path.display().to_string();
    let meta = read_meta(&bytes, &what)?;
    let tensors: HashMap<String, Tensor> = candle_core::safetensors::load_buffer(&bytes, &DEVICE)?;
    let model = Model::restore(meta.spec.clone(), tensors)?;
    if let Some(f) = &meta.freeze {
        model.apply_freeze(f)?;
    }
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_f64_vec;
    use crate::pipeline;

    #[test]
    fn round_trip_preserves_predictions() {
        let mut cfg = RunConfig::quick(3);
        cfg.train.max_steps = Some(2);
        let run = pipeline::train(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.safetensors");
        save(&run.model, Some(&cfg), &path).unwrap();
        let (restored, meta) = load(&path).unwrap();
        assert_eq!(meta.config_hash.unwrap(), cfg.hash().unwrap());
        let batch = run.data.test.batch(&[0, 1, 2], candle_core::DType::F64).unwrap();
        let a = to_f64_vec(&run.model.predict(&batch).unwrap()).unwrap();
        let b = to_f64_vec(&restored.predict(&batch).unwrap()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.safetensors");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load(&path).is_err());
    }
}
