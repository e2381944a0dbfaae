//! Small neural-network toolkit on top of `candle_core`: named parameters with
//! trainability flags, seeded initialization, linear/normalization layers and
//! a pre-norm transformer block whose attention map can be blended with an
//! external mixing matrix.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};

pub const DEVICE: Device = Device::Cpu;

/// How a parameter changes during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateRule {
    /// Updated by the optimizer from gradients.
    Gradient,
    /// Updated in place by a model-defined rule; never seen by the optimizer.
    Persistent,
    /// Never updated (derived constants such as cached text embeddings).
    Constant,
}

#[derive(Debug)]
pub struct Param {
    name: String,
    var: Var,
    rule: UpdateRule,
    trainable: AtomicBool,
}

impl Param {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn var(&self) -> &Var {
        &self.var
    }

    pub fn rule(&self) -> UpdateRule {
        self.rule
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable.load(Ordering::Relaxed)
    }

    pub fn set_trainable(&self, trainable: bool) {
        self.trainable.store(trainable, Ordering::Relaxed);
    }

    /// True when the optimizer should receive this parameter.
    pub fn takes_gradient(&self) -> bool {
        self.rule == UpdateRule::Gradient && self.is_trainable()
    }

    /// Tensor for use in a forward pass. Parameters that do not take gradients are
    /// detached so backprop never walks into them.
    pub fn t(&self) -> Tensor {
        if self.takes_gradient() {
            self.var.as_tensor().clone()
        } else {
            self.var.as_detached_tensor()
        }
    }

    pub fn dims(&self) -> &[usize] {
        self.var.dims()
    }

    pub fn elem_count(&self) -> usize {
        self.var.elem_count()
    }

    pub fn set(&self, value: &Tensor) -> Result<()> {
        if value.dims() != self.dims() {
            return Err(shape_err!(
                "{}: expected {:?}, got {:?}",
                self.name,
                self.dims(),
                value.dims()
            ));
        }
        self.var.set(&value.to_dtype(self.var.dtype())?)?;
        Ok(())
    }
}

pub trait HasParams {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Param>);

    fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        self.collect(&mut out);
        out
    }
}

impl<T: HasParams> HasParams for Vec<T> {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        for item in self {
            item.collect(out);
        }
    }
}

impl<T: HasParams> HasParams for Option<T> {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        if let Some(item) = self {
            item.collect(out);
        }
    }
}

#[derive(Debug, Clone)]
pub enum Init {
    Normal(f64),
    Uniform(f64),
    Zeros,
    Ones,
    Constant(f64),
    Values(Vec<f64>),
}

/// Creates named parameters in a fixed order from a seeded stream. Values found in
/// `overrides` (pretrained weights, checkpoints) replace the initializer.
pub struct ParamFactory {
    rng: ChaCha8Rng,
    dtype: DType,
    overrides: HashMap<String, Tensor>,
    require_overrides: bool,
}

impl ParamFactory {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            overrides: HashMap::new(),
            require_overrides: false,
        }
    }

    /// Every parameter must come from `overrides`; used when restoring checkpoints.
    pub fn from_tensors(tensors: HashMap<String, Tensor>, dtype: DType) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(0),
            dtype,
            overrides: tensors,
            require_overrides: true,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn add_overrides(&mut self, tensors: impl IntoIterator<Item = (String, Tensor)>) {
        self.overrides.extend(tensors);
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Switches to a fresh stream, returning the previous one for [`Self::restore_rng`].
    pub fn reseed(&mut self, seed: u64) -> ChaCha8Rng {
        std::mem::replace(&mut self.rng, ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn restore_rng(&mut self, rng: ChaCha8Rng) {
        self.rng = rng;
    }

    pub fn has_override(&self, name: &str) -> bool {
        self.overrides.contains_key(name)
    }

    /// Names of overrides not yet consumed.
    pub fn unused_overrides(&self) -> Vec<String> {
        let mut names: Vec<String> = self.overrides.keys().cloned().collect();
        names.sort();
        names
    }

    pub fn make(&mut self, name: &str, shape: &[usize], init: Init, rule: UpdateRule) -> Result<Param> {
        let tensor = match self.overrides.remove(name) {
            Some(t) => {
                if t.dims() != shape {
                    return Err(Error::Load {
                        what: name.to_string(),
                        message: format!("expected shape {shape:?}, found {:?}", t.dims()),
                    });
                }
                t.to_dtype(self.dtype)?
            }
            None if self.require_overrides => {
                return Err(Error::Load {
                    what: name.to_string(),
                    message: "tensor missing".into(),
                })
            }
            None => self.sample(shape, &init)?,
        };
        Ok(Param {
            name: name.to_string(),
            var: Var::from_tensor(&tensor)?,
            rule,
            trainable: AtomicBool::new(rule != UpdateRule::Constant),
        })
    }

    pub fn weight(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Param> {
        self.make(name, shape, init, UpdateRule::Gradient)
    }

    fn sample(&mut self, shape: &[usize], init: &Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Normal(std) => {
                let dist = Normal::new(0.0, *std).map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
            Init::Uniform(a) => (0..n).map(|_| self.rng.random_range(-*a..=*a)).collect(),
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Constant(c) => vec![*c; n],
            Init::Values(v) => {
                if v.len() != n {
                    return Err(shape_err!("init values: {} for shape {shape:?}", v.len()));
                }
                v.clone()
            }
        };
        Ok(Tensor::from_vec(values, shape, &DEVICE)?.to_dtype(self.dtype)?)
    }
}

/// Per-call forward context: train/eval mode and the dropout stream.
pub struct Ctx {
    pub train: bool,
    dropout: f64,
    rng: RefCell<ChaCha8Rng>,
}

impl Ctx {
    pub fn eval() -> Self {
        Self {
            train: false,
            dropout: 0.0,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(0)),
        }
    }

    pub fn train(dropout: f64, seed: u64) -> Self {
        Self {
            train: true,
            dropout,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn dropout(&self, x: &Tensor) -> Result<Tensor> {
        if !self.train || self.dropout <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - self.dropout;
        let mut rng = self.rng.borrow_mut();
        let mask: Vec<f64> = (0..x.elem_count())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(mask, x.dims(), &DEVICE)?.to_dtype(x.dtype())?;
        Ok(x.mul(&mask)?)
    }
}

/// `x @ w + b` with `w` stored as `[in, out]`.
#[derive(Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    pub fn new(f: &mut ParamFactory, prefix: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let std = 0.02;
        let weight = f.weight(&format!("{prefix}.weight"), &[d_in, d_out], Init::Normal(std))?;
        let bias = if bias {
            Some(f.weight(&format!("{prefix}.bias"), &[d_out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn d_in(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().ok_or_else(|| shape_err!("linear input is a scalar"))?;
        if d_in != self.d_in() {
            return Err(shape_err!(
                "{}: input width {d_in}, expected {}",
                self.weight.name(),
                self.d_in()
            ));
        }
        let rows = x.elem_count() / d_in;
        let y = x.reshape((rows, d_in))?.matmul(&self.weight.t())?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(&b.t())?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.d_out();
        Ok(y.reshape(out_dims)?)
    }
}

impl HasParams for Linear {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.push(&self.weight);
        if let Some(b) = &self.bias {
            out.push(b);
        }
    }
}

#[derive(Debug)]
pub struct LayerNorm {
    pub weight: Param,
    pub bias: Param,
    eps: f64,
}

impl LayerNorm {
    pub fn new(f: &mut ParamFactory, prefix: &str, width: usize) -> Result<Self> {
        Ok(Self {
            weight: f.weight(&format!("{prefix}.weight"), &[width], Init::Ones)?,
            bias: f.weight(&format!("{prefix}.bias"), &[width], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.weight.t())?
            .broadcast_add(&self.bias.t())?)
    }
}

impl HasParams for LayerNorm {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.push(&self.weight);
        out.push(&self.bias);
    }
}

/// Numerically stabilized softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Batched matmul over arbitrary (equal) leading dimensions.
pub fn matmul_nd(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let ad = a.dims();
    let bd = b.dims();
    if ad.len() < 2 || ad.len() != bd.len() || ad[..ad.len() - 2] != bd[..bd.len() - 2] {
        return Err(shape_err!("matmul {ad:?} x {bd:?}"));
    }
    let lead = &ad[..ad.len() - 2];
    let batch: usize = lead.iter().product();
    let (m, k) = (ad[ad.len() - 2], ad[ad.len() - 1]);
    let (k2, n) = (bd[bd.len() - 2], bd[bd.len() - 1]);
    if k != k2 {
        return Err(shape_err!("matmul inner dims {k} vs {k2}"));
    }
    let a3 = a.contiguous()?.reshape((batch, m, k))?;
    let b3 = b.contiguous()?.reshape((batch, k, n))?;
    let mut out = lead.to_vec();
    out.extend([m, n]);
    Ok(a3.matmul(&b3)?.reshape(out)?)
}

/// `softmax(q k^T * scale)` over the key axis.
pub fn attention_probs(q: &Tensor, k: &Tensor, scale: f64) -> Result<Tensor> {
    let kt = k.transpose(D::Minus2, D::Minus1)?;
    softmax_last(&(matmul_nd(q, &kt)? * scale)?)
}

/// `[..., N, D] -> [..., H, N, D/H]`.
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let dims = x.dims();
    let r = dims.len();
    let (n, d) = (dims[r - 2], dims[r - 1]);
    if d % heads != 0 {
        return Err(shape_err!("width {d} not divisible by {heads} heads"));
    }
    let mut shape = dims[..r - 2].to_vec();
    shape.extend([n, heads, d / heads]);
    Ok(x.reshape(shape)?.transpose(r - 2, r - 1)?.contiguous()?)
}

/// Inverse of [`split_heads`].
pub fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let dims = x.dims();
    let r = dims.len();
    let (h, n, hd) = (dims[r - 3], dims[r - 2], dims[r - 1]);
    let mut shape = dims[..r - 3].to_vec();
    shape.extend([n, h * hd]);
    Ok(x.transpose(r - 3, r - 2)?.contiguous()?.reshape(shape)?)
}

/// Multi-head scaled dot-product attention with separate query and key/value
/// sources. Returns `(output, probs)`; probs are `[..., H, Nq, Nk]`.
pub fn multi_head_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<(Tensor, Tensor)> {
    let d = *q.dims().last().unwrap();
    let scale = 1.0 / ((d / heads) as f64).sqrt();
    let (qh, kh, vh) = (split_heads(q, heads)?, split_heads(k, heads)?, split_heads(v, heads)?);
    let probs = attention_probs(&qh, &kh, scale)?;
    let out = merge_heads(&matmul_nd(&probs, &vh)?)?;
    Ok((out, probs))
}

#[derive(Debug)]
pub struct Mlp {
    pub ln: LayerNorm,
    pub fc: Linear,
    pub proj: Linear,
}

/// Inspection data from one attention sub-layer.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    /// Attention map of the block itself, `[..., H, N, N]`.
    pub probs: Tensor,
    /// Map actually applied to the values (blended when a global map is supplied).
    pub mixing: Tensor,
    /// Per-head values, `[..., H, N, hd]`.
    pub values: Tensor,
    /// `mixing @ values` before the output projection.
    pub mixed: Tensor,
}

/// Pre-norm transformer block with GPT-2 parameter layout.
#[derive(Debug)]
pub struct TransformerBlock {
    pub ln_1: LayerNorm,
    pub c_attn: Linear,
    pub c_proj: Linear,
    pub mlp: Option<Mlp>,
    pub n_head: usize,
    pub causal: bool,
}

impl TransformerBlock {
    /// Block with GPT-2 names: `ln_1`, `attn.c_attn`, `attn.c_proj`, `ln_2`, `mlp.c_fc`, `mlp.c_proj`.
    pub fn new(
        f: &mut ParamFactory,
        prefix: &str,
        width: usize,
        n_head: usize,
        ffn_mult: usize,
        with_mlp: bool,
    ) -> Result<Self> {
        if !width.is_multiple_of(n_head) {
            return Err(Error::Config(format!("width {width} not divisible by {n_head} heads")));
        }
        let ln_1 = LayerNorm::new(f, &format!("{prefix}.ln_1"), width)?;
        let c_attn = Linear::new(f, &format!("{prefix}.attn.c_attn"), width, 3 * width, true)?;
        let c_proj = Linear::new(f, &format!("{prefix}.attn.c_proj"), width, width, true)?;
        let mlp = if with_mlp {
            Some(Mlp {
                ln: LayerNorm::new(f, &format!("{prefix}.ln_2"), width)?,
                fc: Linear::new(f, &format!("{prefix}.mlp.c_fc"), width, ffn_mult * width, true)?,
                proj: Linear::new(f, &format!("{prefix}.mlp.c_proj"), ffn_mult * width, width, true)?,
            })
        } else {
            None
        };
        Ok(Self {
            ln_1,
            c_attn,
            c_proj,
            mlp,
            n_head,
            causal: false,
        })
    }

    pub fn width(&self) -> usize {
        self.c_proj.d_out()
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        Ok(self.forward_mixed(x, None, ctx)?.0)
    }

    /// Runs the block, optionally replacing every head's attention map `M_c` by
    /// `eps * global + (1 - eps) * M_c` where `global` is `[..., N, N]`.
    pub fn forward_mixed(
        &self,
        x: &Tensor,
        global: Option<(&Tensor, f64)>,
        ctx: &Ctx,
    ) -> Result<(Tensor, AttentionTrace)> {
        let dims = x.dims();
        let r = dims.len();
        if r < 2 || dims[r - 1] != self.width() {
            return Err(shape_err!("block expects [..., N, {}], got {dims:?}", self.width()));
        }
        let n = dims[r - 2];
        let width = self.width();
        let h = self.ln_1.forward(x)?;
        let qkv = self.c_attn.forward(&h)?;
        let q = split_heads(&qkv.narrow(D::Minus1, 0, width)?, self.n_head)?;
        let k = split_heads(&qkv.narrow(D::Minus1, width, width)?, self.n_head)?;
        let v = split_heads(&qkv.narrow(D::Minus1, 2 * width, width)?, self.n_head)?;
        let scale = 1.0 / ((width / self.n_head) as f64).sqrt();
        let mut logits = (matmul_nd(&q, &k.transpose(D::Minus2, D::Minus1)?)? * scale)?;
        if self.causal {
            logits = logits.broadcast_add(&causal_mask(n, x.dtype())?)?;
        }
        let probs = softmax_last(&logits)?;
        let mixing = match global {
            Some((g, eps)) => {
                let g = g.unsqueeze(g.rank() - 2)?;
                (probs.clone() * (1.0 - eps))?.broadcast_add(&(g * eps)?)?
            }
            None => probs.clone(),
        };
        let mixed = matmul_nd(&mixing, &v)?;
        let attn = ctx.dropout(&self.c_proj.forward(&merge_heads(&mixed)?)?)?;
        let mut y = (x + attn)?;
        if let Some(mlp) = &self.mlp {
            let hidden = mlp.fc.forward(&mlp.ln.forward(&y)?)?.gelu()?;
            y = (&y + ctx.dropout(&mlp.proj.forward(&hidden)?)?)?;
        }
        Ok((
            y,
            AttentionTrace {
                probs,
                mixing,
                values: v,
                mixed,
            },
        ))
    }
}

fn causal_mask(n: usize, dtype: DType) -> Result<Tensor> {
    let mask: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).map(move |j| if j > i { f64::NEG_INFINITY } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(mask, (n, n), &DEVICE)?.to_dtype(dtype)?)
}

impl HasParams for TransformerBlock {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.ln_1.collect(out);
        self.c_attn.collect(out);
        self.c_proj.collect(out);
        if let Some(mlp) = &self.mlp {
            mlp.ln.collect(out);
            mlp.fc.collect(out);
            mlp.proj.collect(out);
        }
    }
}

/// Flattens a tensor to `Vec<f64>` regardless of dtype.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

pub fn tensor_from(values: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, shape, &DEVICE)?.to_dtype(dtype)?)
}
