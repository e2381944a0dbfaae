//! The assembled dual-branch forecaster.

use std::collections::HashMap;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, apply_freeze_policy, load_backbone, Arch, Backbone, BackboneDims, BackboneSpec, FreezePolicy, ParamPartition};
use crate::channel_text::{encode_text, ChannelDescriptions};
use crate::cmf::{FusionBlock, FusionOut};
use crate::config::{CrossFeed, HeadSource, ModelConfig, Output};
use crate::dataset::Batch;
use crate::error::{shape_err, Error, Result};
use crate::nn::{Ctx, HasParams, Init, Param, ParamFactory, UpdateRule};
use crate::plm_branch::{PlmBranch, PlmTrace};
use crate::tokenizer::{BpeTokenizer, Tokenizer};
use crate::ts_branch::{PatchTransformer, TsBranch};

pub const TEXT_EMBEDDING: &str = "text.embedding";

/// Everything needed to rebuild the parameter structure of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub config: ModelConfig,
    pub backbone: BackboneSpec,
    /// Resolved backbone sizes; absent without a PLM branch.
    pub dims: Option<BackboneDims>,
    pub channels: usize,
    pub channel_names: Vec<String>,
}

#[derive(Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub backbone: Option<Backbone>,
    pub plm: Option<PlmBranch>,
    pub ts: Box<dyn TsBranch>,
    pub fusion: Vec<FusionBlock>,
    /// Token embeddings of the channel descriptions, `[C, L, D_l]`.
    pub text: Option<Param>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Denormalized TS-branch forecast, `[B, C, F]`.
    pub y_ts: Tensor,
    pub y_plm: Option<Tensor>,
    pub plm: Option<PlmTrace>,
    pub fusion: Vec<FusionOut>,
    /// Input of each TS layer.
    pub ts_inputs: Vec<Tensor>,
    /// Output of each TS layer before fusion.
    pub z_ts: Vec<Tensor>,
    /// Features entering the TS head.
    pub z_final: Tensor,
}

impl ForwardOutput {
    pub fn output(&self, which: Output) -> Result<&Tensor> {
        match which {
            Output::Ts => Ok(&self.y_ts),
            Output::Plm => self.y_plm.as_ref().ok_or_else(|| shape_err!("model has no PLM head")),
        }
    }

    /// `Z_cross^i` for every depth (equal to `Z_ts^i` without fusion).
    pub fn z_cross(&self) -> Vec<&Tensor> {
        if self.fusion.is_empty() {
            self.z_ts.iter().collect()
        } else {
            self.fusion.iter().map(|f| &f.z_cross).collect()
        }
    }
}

impl Model {
    /// Fresh model. `descriptions` supplies the channel texts when the text path is on.
    pub fn new(
        config: &ModelConfig,
        backbone_spec: &BackboneSpec,
        channel_names: &[String],
        descriptions: Option<&ChannelDescriptions>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut f = ParamFactory::new(seed, config.precision.dtype());
        let channels = channel_names.len();
        let comps = config.components;
        let backbone = if comps.plm {
            Some(load_backbone(backbone_spec, &mut f)?)
        } else {
            None
        };
        if let Some(b) = &backbone {
            if comps.channel_layer && comps.text {
                let desc = descriptions.ok_or_else(|| Error::Config("text path needs channel descriptions".into()))?;
                if desc.combined.len() != channels {
                    return Err(shape_err!("{} descriptions for {channels} channels", desc.combined.len()));
                }
                let mut desc = desc.clone();
                desc.tokenize(&b.tokenizer, config.text_len)?;
                f.add_overrides([(TEXT_EMBEDDING.to_string(), encode_text(&desc, b)?)]);
            }
        }
        let dims = backbone.as_ref().map(|b| b.dims);
        let spec = ModelSpec {
            config: config.clone(),
            backbone: backbone_spec.clone(),
            dims,
            channels,
            channel_names: channel_names.to_vec(),
        };
        Self::assemble(spec, backbone, &mut f)
    }

    /// Rebuilds a model from saved tensors; every parameter must be present.
    pub fn restore(spec: ModelSpec, tensors: HashMap<String, Tensor>) -> Result<Self> {
        spec.config.validate()?;
        let mut f = ParamFactory::from_tensors(tensors, spec.config.precision.dtype());
        let backbone = match spec.dims {
            Some(dims) if spec.config.components.plm => {
                let tokenizer = match (&spec.backbone.arch, &spec.backbone.weights_dir) {
                    (Arch::Gpt2, Some(dir)) if dir.join("vocab.json").exists() => {
                        Tokenizer::Bpe(Box::new(BpeTokenizer::from_dir(dir)?))
                    }
                    // The text embedding is stored, so the tokenizer is only needed for new descriptions.
                    _ => Tokenizer::Bytes,
                };
                Some(backbone::build(&spec.backbone, dims, tokenizer, &mut f)?)
            }
            _ => None,
        };
        let model = Self::assemble(spec, backbone, &mut f)?;
        let unused = f.unused_overrides();
        if !unused.is_empty() {
            return Err(Error::Load {
                what: "checkpoint".into(),
                message: format!("unexpected tensors: {}", unused.join(", ")),
            });
        }
        Ok(model)
    }

    fn assemble(spec: ModelSpec, backbone: Option<Backbone>, f: &mut ParamFactory) -> Result<Self> {
        let cfg = &spec.config;
        let comps = cfg.components;
        let (plm, text, depth) = match &backbone {
            Some(b) => {
                let text = if comps.channel_layer && comps.text {
                    let l = cfg.text_len;
                    Some(f.make(TEXT_EMBEDDING, &[spec.channels, l, b.width()], Init::Zeros, UpdateRule::Constant)?)
                } else {
                    None
                };
                let plm = PlmBranch::new(f, cfg, spec.channels, b)?;
                (Some(plm), text, b.blocks.len())
            }
            None => (None, None, spec.backbone.n_plm),
        };
        let ts = PatchTransformer::new(f, cfg, depth)?;
        let fusion = match &backbone {
            Some(b) => (0..depth)
                .map(|i| FusionBlock::new(f, cfg, i, b.width()))
                .collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        Ok(Self {
            spec,
            backbone,
            plm,
            ts: Box::new(ts),
            fusion,
            text,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.spec.config
    }

    pub fn channels(&self) -> usize {
        self.spec.channels
    }

    pub fn depth(&self) -> usize {
        self.ts.depth()
    }

    /// Backbone parameters plus the channel-layer block copies.
    pub fn pretrained_side(&self) -> Vec<&Param> {
        let mut out = self.backbone.as_ref().map(|b| b.params()).unwrap_or_default();
        if let Some(p) = &self.plm {
            out.extend(p.block_copies());
        }
        out
    }

    pub fn apply_freeze(&self, policy: &FreezePolicy) -> Result<ParamPartition> {
        let side = self.pretrained_side();
        if side.is_empty() {
            return Ok(ParamPartition::default());
        }
        apply_freeze_policy(&side, policy)
    }

    pub fn forward(&self, batch: &Batch, ctx: &Ctx) -> Result<ForwardOutput> {
        let x = &batch.x;
        let dims = x.dims();
        let cfg = self.config();
        if dims.len() != 3 || dims[1] != self.channels() || dims[2] != cfg.input_len {
            return Err(shape_err!(
                "input {dims:?}, model expects [B, {}, {}]",
                self.channels(),
                cfg.input_len
            ));
        }
        let plm = match (&self.plm, &self.backbone) {
            (Some(p), Some(b)) => {
                let text = self.text.as_ref().map(|t| t.t());
                Some(p.forward(b, x, text.as_ref(), ctx)?)
            }
            _ => None,
        };
        let mut input = self.ts.patch_embedding(x)?;
        let mut ts_inputs = Vec::new();
        let mut z_ts_all = Vec::new();
        let mut fusion = Vec::new();
        let mut z_mix_prev: Option<Tensor> = None;
        let mut z_final = input.clone();
        for i in 0..self.depth() {
            let z_ts = self.ts.layer_forward(i, &input, ctx)?;
            let z_cross = match &plm {
                Some(trace) => {
                    let z_plm = &trace.layers[i].z_plm;
                    let prev = z_mix_prev.as_ref().unwrap_or(z_plm);
                    let out = self.fusion[i].forward(z_plm, prev, &input, &z_ts)?;
                    let z = out.z_cross.clone();
                    z_mix_prev = Some(out.z_mix.clone());
                    fusion.push(out);
                    z
                }
                None => z_ts.clone(),
            };
            ts_inputs.push(input);
            input = match cfg.cross_feed {
                CrossFeed::Forward => z_cross.clone(),
                CrossFeed::Parallel => z_ts.clone(),
            };
            z_ts_all.push(z_ts);
            z_final = z_cross;
        }
        let y_ts = denormalize(&self.ts.head(&z_final)?, batch)?;
        let y_plm = match (&self.plm, &plm) {
            (Some(p), Some(trace)) => {
                let z = match cfg.plm_head_source {
                    HeadSource::Mix => &fusion.last().unwrap().z_mix,
                    HeadSource::Plm => &trace.layers.last().unwrap().z_plm,
                };
                Some(denormalize(&p.head(z)?, batch)?)
            }
            _ => None,
        };
        Ok(ForwardOutput {
            y_ts,
            y_plm,
            plm,
            fusion,
            ts_inputs,
            z_ts: z_ts_all,
            z_final,
        })
    }

    /// Forecast for raw channel-major windows (`C x T` each): the configured
    /// output head, evaluated without touching model state.
    pub fn predict(&self, batch: &Batch) -> Result<Tensor> {
        let out = self.forward(batch, &Ctx::eval())?;
        Ok(out.output(self.config().output)?.clone())
    }

    /// Moves the extractor towards the batch-averaged global map. Training only.
    pub fn update_extractor(&self, out: &ForwardOutput) -> Result<()> {
        if let (Some(p), Some(m_g)) = (&self.plm, out.plm.as_ref().and_then(|t| t.m_g.as_ref())) {
            p.update_extractor(m_g)?;
        }
        Ok(())
    }

    /// `(name, tensor)` for every parameter and buffer.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params()
            .into_iter()
            .map(|p| (p.name().to_string(), p.var().as_detached_tensor()))
            .collect()
    }
}

fn denormalize(y: &Tensor, batch: &Batch) -> Result<Tensor> {
    Ok(y.broadcast_mul(&batch.std)?.broadcast_add(&batch.mean)?)
}

impl HasParams for Model {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.backbone.collect(out);
        if let Some(t) = &self.text {
            out.push(t);
        }
        self.plm.collect(out);
        self.ts.collect(out);
        self.fusion.collect(out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel_text::{compose_descriptions, compute_channel_stats};
    use crate::config::Components;
    use crate::dataset::{make_windows, RawSeries};
    use crate::nn::to_f64_vec;
    use crate::synthetic::{generate, SyntheticSpec};
    use candle_core::DType;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_len: 32,
            horizon: 8,
            text_len: 16,
            d_t: 8,
            ts_heads: 2,
            ..ModelConfig::default()
        }
    }

    fn data() -> RawSeries {
        generate(&SyntheticSpec {
            rows: 200,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    fn model(cfg: &ModelConfig) -> (Model, Batch) {
        let s = data();
        let desc = compose_descriptions(&[], &s.channel_names, &compute_channel_stats(&s)).unwrap();
        let m = Model::new(cfg, &BackboneSpec::stub(2, 8, 2, 1), &s.channel_names, Some(&desc), 5).unwrap();
        let w = make_windows(&s, cfg.input_len, cfg.horizon, 1).unwrap();
        let b = w.batch(&[0, 5, 9], DType::F64).unwrap();
        (m, b)
    }

    #[test]
    fn forward_shapes() {
        let cfg = tiny_config();
        let (m, b) = model(&cfg);
        let out = m.forward(&b, &Ctx::eval()).unwrap();
        assert_eq!(out.y_ts.dims(), &[3, 3, 8]);
        assert_eq!(out.y_plm.as_ref().unwrap().dims(), &[3, 3, 8]);
        assert_eq!(out.fusion.len(), 2);
        assert_eq!(out.plm.as_ref().unwrap().layers[0].z_plm.dims(), &[3, 3, 4, 8]);
    }

    #[test]
    fn predict_matches_ts_head_and_is_repeatable() {
        let (m, b) = model(&tiny_config());
        let p1 = to_f64_vec(&m.predict(&b).unwrap()).unwrap();
        let p2 = to_f64_vec(&m.predict(&b).unwrap()).unwrap();
        assert_eq!(p1, p2);
        let out = m.forward(&b, &Ctx::eval()).unwrap();
        assert_eq!(p1, to_f64_vec(&out.y_ts).unwrap());
    }

    #[test]
    fn ts_only_has_no_backbone() {
        let cfg = ModelConfig {
            components: Components {
                plm: false,
                ..Components::default()
            },
            ..tiny_config()
        };
        let (m, b) = model(&cfg);
        assert!(m.params().iter().all(|p| !p.name().starts_with("backbone.")));
        assert_eq!(m.depth(), 2);
        assert!(m.forward(&b, &Ctx::eval()).unwrap().y_plm.is_none());
    }

    #[test]
    fn tensors_round_trip() {
        let (m, b) = model(&tiny_config());
        let tensors: HashMap<_, _> = m.named_tensors().into_iter().collect();
        let r = Model::restore(m.spec.clone(), tensors.clone()).unwrap();
        assert_eq!(to_f64_vec(&m.predict(&b).unwrap()).unwrap(), to_f64_vec(&r.predict(&b).unwrap()).unwrap());
        let mut extra = tensors;
        extra.insert("junk".into(), Tensor::zeros(1, DType::F64, &crate::nn::DEVICE).unwrap());
        assert!(Model::restore(m.spec.clone(), extra).is_err());
    }

    #[test]
    fn parameter_names_are_unique() {
        let cfg = ModelConfig {
            disjoint_blocks: true,
            ..tiny_config()
        };
        let (m, _) = model(&cfg);
        let mut names: Vec<&str> = m.params().iter().map(|p| p.name()).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
    }
}
