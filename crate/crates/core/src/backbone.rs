//! The pretrained-transformer backbone: GPT-2 blocks (or stand-ins), token and
//! positional tables, its tokenizer, and the freeze policy.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Ctx, HasParams, Init, LayerNorm, Param, ParamFactory, TransformerBlock, DEVICE};
use crate::tokenizer::{BpeTokenizer, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Gpt2,
    Stub,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Pretrained,
    RandomInit,
    Stub,
    /// One untrained attention layer replaces the pretrained stack.
    Llm2Attn,
    /// One untrained transformer block replaces the pretrained stack.
    Llm2Trsf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StubDims {
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_positions: usize,
}

impl Default for StubDims {
    fn default() -> Self {
        Self {
            width: 16,
            heads: 2,
            layers: 12,
            max_positions: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneSpec {
    pub arch: Arch,
    pub n_plm: usize,
    pub provenance: Provenance,
    pub seed: u64,
    /// Directory with `model.safetensors`, `config.json`, `vocab.json`, `merges.txt`.
    pub weights_dir: Option<PathBuf>,
    pub stub: StubDims,
    pub causal: bool,
    pub dropout: f64,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            arch: Arch::Gpt2,
            n_plm: 6,
            provenance: Provenance::Pretrained,
            seed: 0,
            weights_dir: None,
            stub: StubDims::default(),
            causal: false,
            dropout: 0.0,
        }
    }
}

impl BackboneSpec {
    pub fn stub(n_plm: usize, width: usize, heads: usize, seed: u64) -> Self {
        Self {
            arch: Arch::Stub,
            n_plm,
            provenance: Provenance::Stub,
            seed,
            stub: StubDims {
                width,
                heads,
                ..StubDims::default()
            },
            ..Self::default()
        }
    }

    /// Blocks actually instantiated.
    pub fn layer_count(&self) -> usize {
        match self.provenance {
            Provenance::Llm2Attn | Provenance::Llm2Trsf => 1,
            _ => self.n_plm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_plm == 0 {
            return Err(Error::Config("n_plm must be >= 1".into()));
        }
        match (self.arch, self.provenance) {
            (Arch::Stub, Provenance::Pretrained) => {
                Err(Error::Config("stub backbones have no pretrained weights".into()))
            }
            (Arch::Gpt2, Provenance::Stub) => Err(Error::Config("provenance `stub` requires arch `stub`".into())),
            (Arch::Gpt2, _) if self.weights_dir.is_none() => {
                Err(Error::Config("gpt2 backbone needs `weights_dir`".into()))
            }
            _ if !(0.0..1.0).contains(&self.dropout) => Err(Error::Config("dropout must be in [0, 1)".into())),
            _ => Ok(()),
        }
    }
}

/// Resolved architecture sizes, recorded in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneDims {
    pub width: usize,
    pub heads: usize,
    pub total_layers: usize,
    pub vocab: usize,
    pub max_positions: usize,
}

#[derive(Deserialize)]
struct Gpt2Config {
    n_embd: usize,
    n_head: usize,
    n_layer: usize,
    vocab_size: usize,
    n_positions: usize,
}

fn gpt2_dims(dir: &Path) -> Result<BackboneDims> {
    let path = dir.join("config.json");
    if !path.exists() {
        return Ok(BackboneDims {
            width: 768,
            heads: 12,
            total_layers: 12,
            vocab: 50257,
            max_positions: 1024,
        });
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let c: Gpt2Config = serde_json::from_str(&text)?;
    Ok(BackboneDims {
        width: c.n_embd,
        heads: c.n_head,
        total_layers: c.n_layer,
        vocab: c.vocab_size,
        max_positions: c.n_positions,
    })
}

/// Pretrained tensors renamed into `backbone.*`, restricted to the kept blocks.
fn gpt2_tensors(dir: &Path, keep_blocks: usize) -> Result<HashMap<String, Tensor>> {
    let path = dir.join("model.safetensors");
    if !path.exists() {
        return Err(Error::Load {
            what: path.display().to_string(),
            message: "weight file not found".into(),
        });
    }
    let raw = candle_core::safetensors::load(&path, &DEVICE)?;
    let mut out = HashMap::new();
    for (name, t) in raw {
        let name = name.strip_prefix("transformer.").unwrap_or(&name).to_string();
        if name.ends_with("attn.bias") || name.ends_with("attn.masked_bias") {
            continue;
        }
        if let Some(rest) = name.strip_prefix("h.") {
            let idx: usize = rest.split('.').next().and_then(|s| s.parse().ok()).unwrap_or(usize::MAX);
            if idx >= keep_blocks {
                continue;
            }
        }
        out.insert(format!("backbone.{name}"), t);
    }
    Ok(out)
}

#[derive(Debug)]
pub struct Backbone {
    pub spec: BackboneSpec,
    pub dims: BackboneDims,
    pub blocks: Vec<TransformerBlock>,
    wte: Param,
    wpe: Param,
    pub ln_f: LayerNorm,
    pub tokenizer: Tokenizer,
}

/// Seed stream for a provenance so random-init and stub weights differ.
fn backbone_seed(spec: &BackboneSpec) -> u64 {
    let tag = match spec.provenance {
        Provenance::Pretrained => 0,
        Provenance::RandomInit => 1,
        Provenance::Stub => 2,
        Provenance::Llm2Attn => 3,
        Provenance::Llm2Trsf => 4,
    };
    spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(tag)
}

/// Builds the backbone described by `spec`. Pretrained tensors are injected into
/// `f` as overrides; everything else is drawn from the backbone's own seed.
pub fn load_backbone(spec: &BackboneSpec, f: &mut ParamFactory) -> Result<Backbone> {
    spec.validate()?;
    let (dims, tokenizer) = match spec.arch {
        Arch::Stub => (
            BackboneDims {
                width: spec.stub.width,
                heads: spec.stub.heads,
                total_layers: spec.stub.layers,
                vocab: Tokenizer::Bytes.vocab_size(),
                max_positions: spec.stub.max_positions,
            },
            Tokenizer::Bytes,
        ),
        Arch::Gpt2 => {
            let dir = spec.weights_dir.as_ref().unwrap();
            let dims = gpt2_dims(dir)?;
            let tok = Tokenizer::Bpe(Box::new(BpeTokenizer::from_dir(dir)?));
            (dims, tok)
        }
    };
    if spec.n_plm > dims.total_layers {
        return Err(Error::Config(format!(
            "n_plm = {} exceeds the {} available layers",
            spec.n_plm, dims.total_layers
        )));
    }
    if spec.arch == Arch::Gpt2 && spec.provenance != Provenance::RandomInit {
        let keep = if spec.provenance == Provenance::Pretrained { spec.n_plm } else { 0 };
        f.add_overrides(gpt2_tensors(spec.weights_dir.as_ref().unwrap(), keep)?);
    }
    build(spec, dims, tokenizer, f)
}

/// Builds the parameter structure for known dimensions.
pub fn build(spec: &BackboneSpec, dims: BackboneDims, tokenizer: Tokenizer, f: &mut ParamFactory) -> Result<Backbone> {
    let saved = f.reseed(backbone_seed(spec));
    let d = dims.width;
    let wte = f.weight("backbone.wte.weight", &[dims.vocab, d], Init::Normal(0.02))?;
    let wpe = f.weight("backbone.wpe.weight", &[dims.max_positions, d], Init::Normal(0.01))?;
    let with_mlp = spec.provenance != Provenance::Llm2Attn;
    let blocks = (0..spec.layer_count())
        .map(|i| {
            let mut b = TransformerBlock::new(f, &format!("backbone.h.{i}"), d, dims.heads, 4, with_mlp)?;
            b.causal = spec.causal;
            Ok(b)
        })
        .collect::<Result<Vec<_>>>()?;
    let ln_f = LayerNorm::new(f, "backbone.ln_f", d)?;
    f.restore_rng(saved);
    Ok(Backbone {
        spec: spec.clone(),
        dims,
        blocks,
        wte,
        wpe,
        ln_f,
        tokenizer,
    })
}

impl Backbone {
    pub fn width(&self) -> usize {
        self.dims.width
    }

    pub fn token_embedding(&self) -> &Param {
        &self.wte
    }

    pub fn positional_encoding(&self) -> &Param {
        &self.wpe
    }

    /// First `n` positional rows, `[n, D]`.
    pub fn positions(&self, n: usize) -> Result<Tensor> {
        if n > self.dims.max_positions {
            return Err(Error::Shape(format!(
                "{n} tokens exceed the {} positional slots",
                self.dims.max_positions
            )));
        }
        Ok(self.wpe.t().narrow(0, 0, n)?)
    }

    pub fn layer_forward(&self, layer: usize, tokens: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        self.blocks[layer].forward(tokens, ctx)
    }
}

impl HasParams for Backbone {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.push(&self.wte);
        out.push(&self.wpe);
        self.blocks.collect(out);
        self.ln_f.collect(out);
    }
}

/// Which backbone parameters stay trainable. Patterns match the start of any
/// dotted name segment, so `ln_` covers `ln_1`, `ln_2` and `ln_f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreezePolicy {
    pub trainable_patterns: Vec<String>,
    pub freeze: bool,
}

impl Default for FreezePolicy {
    fn default() -> Self {
        Self {
            trainable_patterns: vec!["wpe".into(), "ln_".into()],
            freeze: true,
        }
    }
}

impl FreezePolicy {
    pub fn no_freeze() -> Self {
        Self {
            freeze: false,
            ..Self::default()
        }
    }

    fn matches(&self, name: &str) -> bool {
        name.split('.')
            .any(|seg| self.trainable_patterns.iter().any(|p| seg.starts_with(p.as_str())))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamPartition {
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
}

/// Marks pretrained-side parameters trainable or frozen and reports the partition.
pub fn apply_freeze_policy(params: &[&Param], policy: &FreezePolicy) -> Result<ParamPartition> {
    for p in &policy.trainable_patterns {
        let hit = params
            .iter()
            .any(|q| q.name().split('.').any(|seg| seg.starts_with(p.as_str())));
        if !hit {
            return Err(Error::Policy(format!("pattern {p:?} matches no backbone parameter")));
        }
    }
    let mut partition = ParamPartition::default();
    for &p in params {
        let trainable = !policy.freeze || policy.matches(p.name());
        p.set_trainable(trainable);
        if trainable {
            partition.trainable.push(p.name().to_string());
        } else {
            partition.frozen.push(p.name().to_string());
        }
    }
    Ok(partition)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_f64_vec;
    use candle_core::DType;

    fn stub(n: usize, seed: u64) -> Backbone {
        let mut f = ParamFactory::new(99, DType::F64);
        load_backbone(&BackboneSpec::stub(n, 16, 2, seed), &mut f).unwrap()
    }

    fn values(b: &Backbone) -> Vec<Vec<f64>> {
        b.params().iter().map(|p| to_f64_vec(&p.t()).unwrap()).collect()
    }

    #[test]
    fn stub_echoes_configuration() {
        let b = stub(2, 1);
        assert_eq!(b.blocks.len(), 2);
        assert_eq!(b.width(), 16);
        assert_eq!(b.token_embedding().dims(), &[257, 16]);
    }

    #[test]
    fn random_init_is_seeded() {
        assert_eq!(values(&stub(2, 0)), values(&stub(2, 0)));
        assert_ne!(values(&stub(2, 0)), values(&stub(2, 1)));
        let mut f = ParamFactory::new(99, DType::F64);
        let spec = BackboneSpec {
            provenance: Provenance::RandomInit,
            ..BackboneSpec::stub(2, 16, 2, 0)
        };
        let r = load_backbone(&spec, &mut f).unwrap();
        let shapes = |b: &Backbone| b.params().iter().map(|p| p.dims().to_vec()).collect::<Vec<_>>();
        assert_eq!(shapes(&r), shapes(&stub(2, 0)));
        assert_ne!(values(&r), values(&stub(2, 0)));
    }

    #[test]
    fn layer_forward_contract() {
        let b = stub(1, 0);
        let ctx = Ctx::eval();
        let zeros = Tensor::zeros((3, 5, 16), DType::F64, &DEVICE).unwrap();
        let y = b.layer_forward(0, &zeros, &ctx).unwrap();
        assert_eq!(y.dims(), &[3, 5, 16]);
        assert!(to_f64_vec(&y).unwrap().iter().all(|v| v.is_finite()));
        let y2 = b.layer_forward(0, &zeros, &ctx).unwrap();
        assert_eq!(to_f64_vec(&y).unwrap(), to_f64_vec(&y2).unwrap());
        let one = Tensor::ones((2, 1, 16), DType::F64, &DEVICE).unwrap();
        assert_eq!(b.layer_forward(0, &one, &ctx).unwrap().dims(), &[2, 1, 16]);
        let wrong = Tensor::ones((2, 1, 8), DType::F64, &DEVICE).unwrap();
        assert!(b.layer_forward(0, &wrong, &ctx).is_err());
    }

    #[test]
    fn default_policy_partition() {
        for n in [1, 6] {
            let b = stub(n, 0);
            let part = apply_freeze_policy(&b.params(), &FreezePolicy::default()).unwrap();
            // Two norm (weight, bias) pairs per block, the final norm pair, the positional table.
            assert_eq!(part.trainable.len(), n * 4 + 2 + 1);
            assert!(part.trainable.contains(&"backbone.wpe.weight".to_string()));
            assert!(part.frozen.contains(&"backbone.wte.weight".to_string()));
            assert_eq!(part.trainable.len() + part.frozen.len(), b.params().len());
            assert!(!b.blocks[0].c_attn.weight.is_trainable());
            assert!(b.blocks[0].ln_1.weight.is_trainable());
        }
    }

    #[test]
    fn no_freeze_and_unknown_pattern() {
        let b = stub(2, 0);
        let part = apply_freeze_policy(&b.params(), &FreezePolicy::no_freeze()).unwrap();
        assert!(part.frozen.is_empty());
        let bad = FreezePolicy {
            trainable_patterns: vec!["lora".into()],
            freeze: true,
        };
        assert!(matches!(apply_freeze_policy(&b.params(), &bad), Err(Error::Policy(_))));
    }

    #[test]
    fn llm2_variants_have_one_block() {
        let mut f = ParamFactory::new(0, DType::F64);
        let spec = BackboneSpec {
            provenance: Provenance::Llm2Attn,
            ..BackboneSpec::stub(6, 16, 2, 0)
        };
        let b = load_backbone(&spec, &mut f).unwrap();
        assert_eq!(b.blocks.len(), 1);
        assert!(b.blocks[0].mlp.is_none());
        let spec = BackboneSpec {
            provenance: Provenance::Llm2Trsf,
            ..spec
        };
        let b = load_backbone(&spec, &mut f).unwrap();
        assert!(b.blocks[0].mlp.is_some());
    }

    #[test]
    fn invalid_specs() {
        let mut f = ParamFactory::new(0, DType::F64);
        let too_deep = BackboneSpec::stub(13, 16, 2, 0);
        assert!(load_backbone(&too_deep, &mut f).is_err());
        let no_dir = BackboneSpec::default();
        assert!(load_backbone(&no_dir, &mut f).is_err());
        let missing = BackboneSpec {
            weights_dir: Some(PathBuf::from("/nonexistent/gpt2")),
            ..BackboneSpec::default()
        };
        assert!(load_backbone(&missing, &mut f).is_err());
    }
}
