//! PLM branch: cross-modality channel embedding, the correlation extractor and its
//! global map, the channel and temporal layers run through the backbone, and the
//! PLM forecasting head.

use candle_core::{Tensor, D};

use crate::backbone::Backbone;
use crate::config::ModelConfig;
use crate::error::{shape_err, Result};
use crate::nn::{softmax_last, AttentionTrace, Ctx, HasParams, Init, Linear, Param, ParamFactory, TransformerBlock, UpdateRule};

/// `[B, C, T] -> [B, C, N_p, S]` with `N_p = floor((T - S) / stride) + 1`.
pub fn patchify(x: &Tensor, patch_len: usize, stride: usize) -> Result<Tensor> {
    let t = x.dim(D::Minus1)?;
    if t < patch_len {
        return Err(shape_err!("series of length {t} shorter than patch {patch_len}"));
    }
    let n = (t - patch_len) / stride + 1;
    let patches = (0..n)
        .map(|p| x.narrow(D::Minus1, p * stride, patch_len))
        .collect::<candle_core::Result<Vec<_>>>()?;
    Ok(Tensor::stack(&patches, x.rank() - 1)?)
}

/// `M_g[i, j] = softmax_j(E_f[i] . E[j])`; `e_f` is `[..., C, D_r]`, `e` is `[C, D_r]`.
pub fn global_correlation_map(e_f: &Tensor, e: &Tensor) -> Result<Tensor> {
    let logits = e_f.broadcast_matmul(&e.t()?)?;
    softmax_last(&logits)
}

/// `E' = gamma E + (1 - gamma) M E`.
pub fn extractor_update(e: &Tensor, m_g: &Tensor, gamma: f64) -> Result<Tensor> {
    if gamma == 1.0 {
        return Ok(e.clone());
    }
    Ok(((e * gamma)? + (m_g.matmul(e)? * (1.0 - gamma))?)?)
}

#[derive(Debug)]
pub struct ChannelPath {
    pub channel_embed: Linear,
    /// Weights over the text-token axis, `[L]`.
    pub text_compress: Option<Param>,
    pub extractor_proj: Option<Linear>,
    /// The correlation extractor `E`, `[C, D_r]`.
    pub extractor: Option<Param>,
    /// Private copies of the backbone blocks when channel and temporal layers are disjoint.
    pub blocks: Option<Vec<TransformerBlock>>,
}

#[derive(Debug)]
pub struct PlmBranch {
    pub patch_embed: Linear,
    pub channel: Option<ChannelPath>,
    pub head: Linear,
    pub eps: f64,
    pub gamma: f64,
    pub mg_per_layer: bool,
    patch_len: usize,
    stride: usize,
}

/// One PLM layer: `Z_plm^i` and the channel attention that produced its last token.
#[derive(Debug, Clone)]
pub struct PlmLayer {
    /// `[B, C, N_m, D_l]`.
    pub z_plm: Tensor,
    pub channel_attention: Option<AttentionTrace>,
    pub m_g: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct PlmTrace {
    /// `[B, C, D_l]`.
    pub e_cross: Option<Tensor>,
    /// Global map computed from `E_cross`, `[B, C, C]`.
    pub m_g: Option<Tensor>,
    pub layers: Vec<PlmLayer>,
}

impl PlmBranch {
    pub fn new(f: &mut ParamFactory, cfg: &ModelConfig, channels: usize, backbone: &Backbone) -> Result<Self> {
        let d = backbone.width();
        let comps = cfg.components;
        let patch_embed = Linear::new(f, "plm.patch_embed", cfg.patch_len, d, true)?;
        let channel = if comps.channel_layer {
            let channel_embed = Linear::new(f, "plm.channel_embed", cfg.input_len, d, true)?;
            let text_compress = if comps.text {
                let l = cfg.text_len;
                Some(f.weight("plm.text_compress.weight", &[l], Init::Constant(1.0 / l as f64))?)
            } else {
                None
            };
            let (extractor_proj, extractor) = if comps.extractor {
                let d_r = cfg.d_r.unwrap_or((d / 4).max(1));
                let rule = if cfg.train_extractor {
                    UpdateRule::Gradient
                } else {
                    UpdateRule::Persistent
                };
                (
                    Some(Linear::new(f, "plm.extractor_proj", d, d_r, true)?),
                    Some(f.make("plm.extractor", &[channels, d_r], Init::Normal(0.02), rule)?),
                )
            } else {
                (None, None)
            };
            let blocks = if cfg.disjoint_blocks {
                Some(copy_blocks(f, backbone)?)
            } else {
                None
            };
            Some(ChannelPath {
                channel_embed,
                text_compress,
                extractor_proj,
                extractor,
                blocks,
            })
        } else {
            None
        };
        let n_m = cfg.n_tokens();
        let head = Linear::new(f, "plm.head", n_m * d, cfg.horizon, true)?;
        Ok(Self {
            patch_embed,
            channel,
            head,
            eps: cfg.eps,
            gamma: cfg.gamma,
            mg_per_layer: cfg.mg_per_layer,
            patch_len: cfg.patch_len,
            stride: cfg.stride,
        })
    }

    /// `[B, C, T] -> [B, C, D_l]`.
    pub fn channel_embedding(&self, x: &Tensor) -> Result<Tensor> {
        match &self.channel {
            Some(c) => c.channel_embed.forward(x),
            None => Err(shape_err!("channel layer disabled")),
        }
    }

    /// `[C, L, D_l] -> [C, D_l]`.
    pub fn compress_text(&self, text: &Tensor) -> Result<Tensor> {
        let w = self
            .channel
            .as_ref()
            .and_then(|c| c.text_compress.as_ref())
            .ok_or_else(|| shape_err!("text path disabled"))?;
        let l = text.dim(1)?;
        if l != w.dims()[0] {
            return Err(shape_err!("text length {l}, expected {}", w.dims()[0]));
        }
        Ok(text.broadcast_mul(&w.t().reshape((1, l, 1))?)?.sum(1)?)
    }

    /// `E_f` for a set of channel tokens `[..., C, D_l]`, then `M_g`.
    pub fn correlation_map(&self, tokens: &Tensor) -> Result<Option<Tensor>> {
        let Some(c) = &self.channel else { return Ok(None) };
        match (&c.extractor_proj, &c.extractor) {
            (Some(proj), Some(e)) => Ok(Some(global_correlation_map(&proj.forward(tokens)?, &e.t())?)),
            _ => Ok(None),
        }
    }

    /// Applies the persistence rule with the batch-averaged map.
    pub fn update_extractor(&self, m_g: &Tensor) -> Result<()> {
        let Some(e) = self.channel.as_ref().and_then(|c| c.extractor.as_ref()) else {
            return Ok(());
        };
        let m = if m_g.rank() == 3 { m_g.mean(0)? } else { m_g.clone() };
        let current = e.var().as_detached_tensor();
        e.set(&extractor_update(&current, &m.detach(), self.gamma)?)
    }

    pub fn extractor(&self) -> Option<&Param> {
        self.channel.as_ref().and_then(|c| c.extractor.as_ref())
    }

    /// Runs the PLM trunk for a normalized batch `x` `[B, C, T]`.
    /// `text` holds the token embeddings `[C, L, D_l]` when the text path is on.
    pub fn forward(&self, backbone: &Backbone, x: &Tensor, text: Option<&Tensor>, ctx: &Ctx) -> Result<PlmTrace> {
        let patches = patchify(x, self.patch_len, self.stride)?;
        let n_p = patches.dim(2)?;
        let mut temporal = self
            .patch_embed
            .forward(&patches)?
            .broadcast_add(&backbone.positions(n_p)?)?;
        let mut channel_tokens = None;
        let mut e_cross = None;
        let mut m_g = None;
        if let Some(path) = &self.channel {
            let mut e = path.channel_embed.forward(x)?;
            if let (Some(_), Some(text)) = (&path.text_compress, text) {
                e = e.broadcast_add(&self.compress_text(text)?)?;
            }
            m_g = self.correlation_map(&e)?;
            channel_tokens = Some(e.clone());
            e_cross = Some(e);
        }
        let n_layers = backbone.blocks.len();
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let block = &backbone.blocks[i];
            let tem = block.forward(&temporal, ctx)?;
            let (z, trace, layer_m_g) = match (&self.channel, &channel_tokens) {
                (Some(path), Some(tokens)) => {
                    let layer_m_g = if self.mg_per_layer && i > 0 {
                        self.correlation_map(tokens)?
                    } else {
                        m_g.clone()
                    };
                    let cblock = path.blocks.as_ref().map_or(block, |b| &b[i]);
                    let global = layer_m_g.as_ref().map(|g| (g, self.eps));
                    let (chan, trace) = cblock.forward_mixed(tokens, global, ctx)?;
                    (Tensor::cat(&[&tem, &chan.unsqueeze(2)?], 2)?, Some(trace), layer_m_g)
                }
                _ => (tem, None, None),
            };
            let z = if i + 1 == n_layers { backbone.ln_f.forward(&z)? } else { z };
            // The next layer splits Z_plm^i back into temporal tokens and the channel token.
            temporal = z.narrow(2, 0, n_p)?;
            if channel_tokens.is_some() {
                channel_tokens = Some(z.narrow(2, n_p, 1)?.squeeze(2)?);
            }
            layers.push(PlmLayer {
                z_plm: z,
                channel_attention: trace,
                m_g: layer_m_g,
            });
        }
        Ok(PlmTrace { e_cross, m_g, layers })
    }

    /// `[B, C, N_m, D_l] -> [B, C, F]` in normalized units.
    pub fn head(&self, z: &Tensor) -> Result<Tensor> {
        let flat = z.flatten_from(2)?;
        self.head.forward(&flat)
    }
}

fn copy_blocks(f: &mut ParamFactory, backbone: &Backbone) -> Result<Vec<TransformerBlock>> {
    let mut copies = Vec::new();
    for (i, block) in backbone.blocks.iter().enumerate() {
        let src = format!("backbone.h.{i}");
        let dst = format!("plm.channel_blocks.{i}");
        for p in block.params() {
            let name = p.name().replacen(&src, &dst, 1);
            if !f.has_override(&name) {
                f.add_overrides([(name, p.var().as_detached_tensor())]);
            }
        }
        let mut copy = TransformerBlock::new(
            f,
            &dst,
            block.width(),
            block.n_head,
            block.mlp.as_ref().map_or(4, |m| m.fc.d_out() / block.width()),
            block.mlp.is_some(),
        )?;
        copy.causal = block.causal;
        copies.push(copy);
    }
    Ok(copies)
}

impl HasParams for ChannelPath {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.channel_embed.collect(out);
        if let Some(w) = &self.text_compress {
            out.push(w);
        }
        self.extractor_proj.collect(out);
        if let Some(e) = &self.extractor {
            out.push(e);
        }
    }
}

impl PlmBranch {
    /// Copies of backbone blocks, governed by the freeze policy like the originals.
    pub fn block_copies(&self) -> Vec<&Param> {
        self.channel
            .as_ref()
            .and_then(|c| c.blocks.as_ref())
            .map(|b| b.params())
            .unwrap_or_default()
    }
}

impl HasParams for PlmBranch {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.patch_embed.collect(out);
        self.channel.collect(out);
        self.head.collect(out);
        if let Some(b) = self.channel.as_ref().and_then(|c| c.blocks.as_ref()) {
            b.collect(out);
        }
    }
}
