//! Time-series branch: a channel-independent patch transformer whose layers are
//! interleaved with the fusion blocks, plus its forecasting head.

use std::fmt::Debug;

use candle_core::Tensor;

use crate::config::ModelConfig;
use crate::error::{shape_err, Result};
use crate::nn::{Ctx, HasParams, Init, Linear, Param, ParamFactory, TransformerBlock};
use crate::plm_branch::patchify;

/// What the model needs from a TS branch. Alternative temporal models can be
/// plugged in by implementing this.
pub trait TsBranch: HasParams + Debug + Send + Sync {
    fn depth(&self) -> usize;

    fn width(&self) -> usize;

    /// Normalized `[B, C, T]` to `[B, C, N_p, D_t]`.
    fn patch_embedding(&self, x: &Tensor) -> Result<Tensor>;

    fn layer_forward(&self, layer: usize, input: &Tensor, ctx: &Ctx) -> Result<Tensor>;

    /// `[B, C, N_p, D_t]` to normalized `[B, C, F]`.
    fn head(&self, z: &Tensor) -> Result<Tensor>;
}

#[derive(Debug)]
pub struct PatchTransformer {
    pub patch_embed: Linear,
    /// Learned positions added once before the first layer, `[N_p, D_t]`.
    pub pos: Param,
    pub blocks: Vec<TransformerBlock>,
    pub head: Linear,
    patch_len: usize,
    stride: usize,
}

impl PatchTransformer {
    pub fn new(f: &mut ParamFactory, cfg: &ModelConfig, depth: usize) -> Result<Self> {
        let n_p = cfg.n_patches();
        let d = cfg.d_t;
        let patch_embed = Linear::new(f, "ts.patch_embed", cfg.patch_len, d, true)?;
        let pos = f.weight("ts.pos", &[n_p, d], Init::Normal(0.02))?;
        let blocks = (0..depth)
            .map(|i| TransformerBlock::new(f, &format!("ts.h.{i}"), d, cfg.ts_heads, cfg.ts_ffn_mult, true))
            .collect::<Result<Vec<_>>>()?;
        let head = Linear::new(f, "ts.head", n_p * d, cfg.horizon, true)?;
        Ok(Self {
            patch_embed,
            pos,
            blocks,
            head,
            patch_len: cfg.patch_len,
            stride: cfg.stride,
        })
    }
}

impl TsBranch for PatchTransformer {
    fn depth(&self) -> usize {
        self.blocks.len()
    }

    fn width(&self) -> usize {
        self.patch_embed.d_out()
    }

    fn patch_embedding(&self, x: &Tensor) -> Result<Tensor> {
        let patches = patchify(x, self.patch_len, self.stride)?;
        let n_p = patches.dim(2)?;
        if n_p != self.pos.dims()[0] {
            return Err(shape_err!("{n_p} patches, model built for {}", self.pos.dims()[0]));
        }
        Ok(self.patch_embed.forward(&patches)?.broadcast_add(&self.pos.t())?)
    }

    fn layer_forward(&self, layer: usize, input: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let block = self
            .blocks
            .get(layer)
            .ok_or_else(|| shape_err!("TS layer {layer} of {}", self.blocks.len()))?;
        block.forward(input, ctx)
    }

    fn head(&self, z: &Tensor) -> Result<Tensor> {
        self.head.forward(&z.flatten_from(2)?)
    }
}

impl HasParams for PatchTransformer {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.patch_embed.collect(out);
        out.push(&self.pos);
        self.blocks.collect(out);
        self.head.collect(out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{tensor_from, to_f64_vec, DEVICE};
    use candle_core::DType;

    fn branch() -> PatchTransformer {
        let cfg = ModelConfig {
            d_t: 16,
            ts_heads: 2,
            horizon: 24,
            ..ModelConfig::default()
        };
        PatchTransformer::new(&mut ParamFactory::new(1, DType::F64), &cfg, 2).unwrap()
    }

    #[test]
    fn embedding_and_head_shapes() {
        let b = branch();
        let x = Tensor::zeros((2, 7, 96), DType::F64, &DEVICE).unwrap();
        let e = b.patch_embedding(&x).unwrap();
        assert_eq!(e.dims(), &[2, 7, 11, 16]);
        let z = b.layer_forward(0, &e, &Ctx::eval()).unwrap();
        assert_eq!(z.dims(), e.dims());
        assert_eq!(b.head(&z).unwrap().dims(), &[2, 7, 24]);
    }

    #[test]
    fn zero_input_embeds_to_positions() {
        let b = branch();
        let x = Tensor::zeros((1, 1, 96), DType::F64, &DEVICE).unwrap();
        let e = to_f64_vec(&b.patch_embedding(&x).unwrap()).unwrap();
        assert_eq!(e, to_f64_vec(&b.pos.t()).unwrap());
    }

    #[test]
    fn single_patch_is_valid() {
        let cfg = ModelConfig {
            input_len: 16,
            d_t: 8,
            ts_heads: 2,
            horizon: 4,
            ..ModelConfig::default()
        };
        let b = PatchTransformer::new(&mut ParamFactory::new(1, DType::F64), &cfg, 1).unwrap();
        let x = tensor_from(vec![0.5; 32], &[1, 2, 16], DType::F64).unwrap();
        let z = b.layer_forward(0, &b.patch_embedding(&x).unwrap(), &Ctx::eval()).unwrap();
        assert_eq!(b.head(&z).unwrap().dims(), &[1, 2, 4]);
        assert!(b.layer_forward(1, &z, &Ctx::eval()).is_err());
    }
}
