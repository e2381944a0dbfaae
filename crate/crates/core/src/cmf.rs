//! Cross-model fusion: memory and current attention over PLM features, the gated
//! mix that accumulates across depths, and cross attention from the TS branch.
//! Also the simpler fusion baselines used by ablations.

use candle_core::Tensor;

use crate::config::{Components, Fusion, ModelConfig};
use crate::error::{shape_err, Result};
use crate::nn::{multi_head_attention, HasParams, Init, Linear, Param, ParamFactory, UpdateRule};

/// `1 / (1 + e^-x)`, differentiable.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Projection triple for one attention: query source, key/value source.
#[derive(Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(
        f: &mut ParamFactory,
        names: [&str; 3],
        d_query: usize,
        d_kv: usize,
        d_out: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            q: Linear::new(f, names[0], d_query, d_out, false)?,
            k: Linear::new(f, names[1], d_kv, d_out, false)?,
            v: Linear::new(f, names[2], d_kv, d_out, false)?,
            heads,
        })
    }

    /// `softmax(Q K^T / sqrt(d)) V` with `Q` from `query` and `K, V` from `kv`.
    /// Returns the output and the attention map.
    pub fn forward(&self, query: &Tensor, kv: &Tensor) -> Result<(Tensor, Tensor)> {
        let q = self.q.forward(query)?;
        let k = self.k.forward(kv)?;
        let v = self.v.forward(kv)?;
        multi_head_attention(&q, &k, &v, self.heads)
    }
}

impl HasParams for Attention {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.q.collect(out);
        self.k.collect(out);
        self.v.collect(out);
    }
}

// One op per depth, so the size spread between variants is irrelevant.
#[allow(clippy::large_enum_variant)]
#[derive(Debug)]
pub enum FusionOp {
    Cmf {
        /// Query from `Z_plm^i`, keys and values from `Z_mix^{i-1}`.
        memory: Option<Attention>,
        /// Query from `Z_mix^{i-1}`, keys and values from `Z_plm^i`.
        current: Option<Attention>,
        beta_raw: Param,
        cross: Attention,
    },
    Attention {
        cross: Attention,
    },
    Sum {
        /// Token alignment `[N_p, N_m]`.
        align: Param,
        proj: Linear,
    },
    Concat {
        align: Param,
        proj: Linear,
    },
}

/// Result of one fusion depth.
#[derive(Debug, Clone)]
pub struct FusionOut {
    /// Accumulated PLM features passed to the next depth, `[B, C, N_m, D_l]`.
    pub z_mix: Tensor,
    /// `[B, C, N_p, D_t]`.
    pub z_cross: Tensor,
    pub attn_mix: Option<Tensor>,
    pub attn_plm: Option<Tensor>,
    pub beta: Option<Tensor>,
    /// Attention maps in `memory, current, cross` order (those present).
    pub maps: Vec<Tensor>,
}

#[derive(Debug)]
pub struct FusionBlock {
    pub op: FusionOp,
}

/// `[I | 1]`: each temporal token keeps itself and receives the channel token.
fn alignment_init(n_p: usize, n_m: usize) -> Vec<f64> {
    let mut a = vec![0.0; n_p * n_m];
    for i in 0..n_p {
        a[i * n_m + i] = 1.0;
        if n_m > n_p {
            a[i * n_m + n_p] = 1.0;
        }
    }
    a
}

impl FusionBlock {
    pub fn new(f: &mut ParamFactory, cfg: &ModelConfig, depth: usize, d_l: usize) -> Result<Self> {
        let p = format!("cmf.{depth}");
        let n = |s: &str| format!("{p}.{s}");
        let d_t = cfg.d_t;
        let h = cfg.cmf_heads;
        let (n_p, n_m) = (cfg.n_patches(), cfg.n_tokens());
        if !d_l.is_multiple_of(h) {
            return Err(shape_err!("PLM width {d_l} not divisible by {h} fusion heads"));
        }
        let cross_names = [n("q_cross"), n("k_cross"), n("v_cross")];
        let cross_names = [cross_names[0].as_str(), cross_names[1].as_str(), cross_names[2].as_str()];
        let op = match cfg.fusion {
            Fusion::Cmf => {
                let Components { memory, current, gating, .. } = cfg.components;
                let memory = if memory {
                    Some(Attention::new(f, [&n("w_qc"), &n("w_km"), &n("w_vm")], d_l, d_l, d_l, h)?)
                } else {
                    None
                };
                let current = if current {
                    Some(Attention::new(f, [&n("w_qm"), &n("w_kc"), &n("w_vc")], d_l, d_l, d_l, h)?)
                } else {
                    None
                };
                let rule = if gating { UpdateRule::Gradient } else { UpdateRule::Constant };
                let beta_raw = f.make(&n("beta_raw"), &[1], Init::Zeros, rule)?;
                let cross = Attention::new(f, cross_names, d_t, d_l, d_t, h)?;
                FusionOp::Cmf {
                    memory,
                    current,
                    beta_raw,
                    cross,
                }
            }
            Fusion::Attention => FusionOp::Attention {
                cross: Attention::new(f, cross_names, d_t, d_l, d_t, h)?,
            },
            Fusion::Sum => FusionOp::Sum {
                align: f.weight(&n("align"), &[n_p, n_m], Init::Values(alignment_init(n_p, n_m)))?,
                proj: Linear::new(f, &n("proj"), d_l, d_t, false)?,
            },
            Fusion::Concat => FusionOp::Concat {
                align: f.weight(&n("align"), &[n_p, n_m], Init::Values(alignment_init(n_p, n_m)))?,
                proj: Linear::new(f, &n("proj"), d_t + d_l, d_t, true)?,
            },
        };
        Ok(Self { op })
    }

    /// `beta = sigmoid(beta_raw)` for the gated block.
    pub fn beta(&self) -> Result<Option<Tensor>> {
        match &self.op {
            FusionOp::Cmf { beta_raw, .. } => Ok(Some(sigmoid(&beta_raw.t())?)),
            _ => Ok(None),
        }
    }

    /// `z_plm`: this depth's PLM features; `z_mix_prev`: accumulated features
    /// (equal to `z_plm` at the first depth); `ts_input`: input of the TS layer at
    /// this depth (query source); `z_ts`: its output.
    pub fn forward(&self, z_plm: &Tensor, z_mix_prev: &Tensor, ts_input: &Tensor, z_ts: &Tensor) -> Result<FusionOut> {
        if z_plm.dims() != z_mix_prev.dims() {
            return Err(shape_err!("Z_plm {:?} vs Z_mix {:?}", z_plm.dims(), z_mix_prev.dims()));
        }
        match &self.op {
            FusionOp::Cmf {
                memory,
                current,
                cross,
                ..
            } => {
                let mut maps = Vec::new();
                let attn_mix = match memory {
                    Some(a) => {
                        let (out, probs) = a.forward(z_plm, z_mix_prev)?;
                        maps.push(probs);
                        Some(out)
                    }
                    None => None,
                };
                let attn_plm = match current {
                    Some(a) => {
                        let (out, probs) = a.forward(z_mix_prev, z_plm)?;
                        maps.push(probs);
                        Some(out)
                    }
                    None => None,
                };
                let beta = self.beta()?.unwrap();
                let z_mix = match (&attn_mix, &attn_plm) {
                    (Some(m), Some(p)) => gated_fusion(m, p, &beta)?,
                    (Some(m), None) => m.clone(),
                    (None, Some(p)) => p.clone(),
                    (None, None) => return Err(shape_err!("fusion block without memory or current attention")),
                };
                let (attn_cross, probs) = cross.forward(ts_input, &z_mix)?;
                maps.push(probs);
                Ok(FusionOut {
                    z_cross: (attn_cross + z_ts)?,
                    z_mix,
                    attn_mix,
                    attn_plm,
                    beta: Some(beta),
                    maps,
                })
            }
            FusionOp::Attention { cross } => {
                let (attn_cross, probs) = cross.forward(ts_input, z_plm)?;
                Ok(FusionOut {
                    z_cross: (attn_cross + z_ts)?,
                    z_mix: z_plm.clone(),
                    attn_mix: None,
                    attn_plm: None,
                    beta: None,
                    maps: vec![probs],
                })
            }
            FusionOp::Sum { align, proj } => {
                let aligned = align.t().broadcast_matmul(z_plm)?;
                Ok(FusionOut {
                    z_cross: (z_ts + proj.forward(&aligned)?)?,
                    z_mix: z_plm.clone(),
                    attn_mix: None,
                    attn_plm: None,
                    beta: None,
                    maps: Vec::new(),
                })
            }
            FusionOp::Concat { align, proj } => {
                let aligned = align.t().broadcast_matmul(z_plm)?;
                let joined = Tensor::cat(&[z_ts, &aligned], candle_core::D::Minus1)?;
                Ok(FusionOut {
                    z_cross: proj.forward(&joined)?,
                    z_mix: z_plm.clone(),
                    attn_mix: None,
                    attn_plm: None,
                    beta: None,
                    maps: Vec::new(),
                })
            }
        }
    }
}

/// `beta * attn_mix + (1 - beta) * attn_plm`.
pub fn gated_fusion(attn_mix: &Tensor, attn_plm: &Tensor, beta: &Tensor) -> Result<Tensor> {
    if attn_mix.dims() != attn_plm.dims() {
        return Err(shape_err!("gated fusion {:?} vs {:?}", attn_mix.dims(), attn_plm.dims()));
    }
    let one_minus = beta.affine(-1.0, 1.0)?;
    Ok((attn_mix.broadcast_mul(beta)? + attn_plm.broadcast_mul(&one_minus)?)?)
}

impl HasParams for FusionBlock {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        match &self.op {
            FusionOp::Cmf {
                memory,
                current,
                beta_raw,
                cross,
            } => {
                memory.collect(out);
                current.collect(out);
                out.push(beta_raw);
                cross.collect(out);
            }
            FusionOp::Attention { cross } => cross.collect(out),
            FusionOp::Sum { align, proj } | FusionOp::Concat { align, proj } => {
                out.push(align);
                proj.collect(out);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{to_f64_vec, DEVICE};
    use candle_core::DType;

    fn cfg(fusion: Fusion) -> ModelConfig {
        ModelConfig {
            input_len: 32,
            horizon: 4,
            d_t: 6,
            ts_heads: 2,
            fusion,
            ..ModelConfig::default()
        }
    }

    fn rand(f: &mut ParamFactory, name: &str, shape: &[usize]) -> Tensor {
        f.weight(name, shape, Init::Normal(1.0)).unwrap().t()
    }

    #[test]
    fn sigmoid_midpoint_and_range() {
        let x = Tensor::new(&[0.0f64, 30.0, -30.0], &DEVICE).unwrap();
        let s = to_f64_vec(&sigmoid(&x).unwrap()).unwrap();
        assert_eq!(s[0], 0.5);
        assert!(s[1] < 1.0 && s[2] > 0.0);
    }

    #[test]
    fn gated_fusion_properties() {
        let mut f = ParamFactory::new(0, DType::F64);
        let a = rand(&mut f, "a", &[2, 3, 4]);
        let b = rand(&mut f, "b", &[2, 3, 4]);
        let half = Tensor::new(&[0.5f64], &DEVICE).unwrap();
        let avg = to_f64_vec(&gated_fusion(&a, &b, &half).unwrap()).unwrap();
        let (av, bv) = (to_f64_vec(&a).unwrap(), to_f64_vec(&b).unwrap());
        for k in 0..avg.len() {
            assert_eq!(avg[k], 0.5 * av[k] + 0.5 * bv[k]);
        }
        let same = to_f64_vec(&gated_fusion(&a, &a, &Tensor::new(&[0.3f64], &DEVICE).unwrap()).unwrap()).unwrap();
        for k in 0..same.len() {
            assert!((same[k] - av[k]).abs() < 1e-15);
        }
        let near_one = to_f64_vec(&gated_fusion(&a, &b, &Tensor::new(&[0.99f64], &DEVICE).unwrap()).unwrap()).unwrap();
        let near_zero = to_f64_vec(&gated_fusion(&a, &b, &Tensor::new(&[0.01f64], &DEVICE).unwrap()).unwrap()).unwrap();
        for k in 0..av.len() {
            assert!((near_one[k] - av[k]).abs() <= (near_zero[k] - av[k]).abs() + 1e-15);
        }
    }

    #[test]
    fn single_token_attention_returns_values() {
        let mut f = ParamFactory::new(0, DType::F64);
        let a = Attention::new(&mut f, ["q", "k", "v"], 4, 4, 4, 1).unwrap();
        let x = rand(&mut f, "x", &[2, 1, 4]);
        let y = rand(&mut f, "y", &[2, 1, 4]);
        let (out, probs) = a.forward(&x, &y).unwrap();
        assert!(to_f64_vec(&probs).unwrap().iter().all(|p| (*p - 1.0).abs() < 1e-15));
        let v = to_f64_vec(&a.v.forward(&y).unwrap()).unwrap();
        assert_eq!(to_f64_vec(&out).unwrap(), v);
    }

    #[test]
    fn sum_with_zero_projection_is_identity() {
        let c = cfg(Fusion::Sum);
        let mut f = ParamFactory::new(0, DType::F64);
        let block = FusionBlock::new(&mut f, &c, 0, 8).unwrap();
        if let FusionOp::Sum { proj, .. } = &block.op {
            proj.weight.set(&Tensor::zeros((8, 6), DType::F64, &DEVICE).unwrap()).unwrap();
        }
        let z_plm = rand(&mut f, "p", &[1, 2, 4, 8]);
        let z_ts = rand(&mut f, "t", &[1, 2, 3, 6]);
        let out = block.forward(&z_plm, &z_plm, &z_ts, &z_ts).unwrap();
        assert_eq!(to_f64_vec(&out.z_cross).unwrap(), to_f64_vec(&z_ts).unwrap());
    }

    #[test]
    fn shapes_for_every_mode() {
        for fusion in [Fusion::Cmf, Fusion::Attention, Fusion::Sum, Fusion::Concat] {
            let c = cfg(fusion);
            let mut f = ParamFactory::new(0, DType::F64);
            let block = FusionBlock::new(&mut f, &c, 0, 8).unwrap();
            let z_plm = rand(&mut f, "p", &[2, 3, 4, 8]);
            let z_ts = rand(&mut f, "t", &[2, 3, 3, 6]);
            let out = block.forward(&z_plm, &z_plm, &z_ts, &z_ts).unwrap();
            assert_eq!(out.z_cross.dims(), &[2, 3, 3, 6], "{fusion:?}");
            assert_eq!(out.z_mix.dims(), &[2, 3, 4, 8]);
        }
    }

    #[test]
    fn ungated_beta_is_constant_half() {
        let mut c = cfg(Fusion::Cmf);
        c.components.gating = false;
        let mut f = ParamFactory::new(0, DType::F64);
        let block = FusionBlock::new(&mut f, &c, 0, 8).unwrap();
        assert_eq!(to_f64_vec(&block.beta().unwrap().unwrap()).unwrap(), vec![0.5]);
        assert!(!block.params().iter().find(|p| p.name() == "cmf.0.beta_raw").unwrap().takes_gradient());
    }
}
