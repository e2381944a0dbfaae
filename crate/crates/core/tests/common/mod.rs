//! Loop-based reference implementations and small fixtures shared by the
//! integration tests. Nothing here uses tensor ops beyond reading values out.
#![allow(dead_code)]

use candle_core::{DType, Tensor};
use plmcast::backbone::BackboneSpec;
use plmcast::channel_text::{compose_descriptions, compute_channel_stats};
use plmcast::config::ModelConfig;
use plmcast::dataset::{make_windows, Batch};
use plmcast::nn::{to_f64_vec, Param, DEVICE};
use plmcast::synthetic::{generate, SyntheticSpec};
use plmcast::Model;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn to_tensor(m: &Mat) -> Tensor {
    let (r, c) = (m.len(), m[0].len());
    Tensor::from_vec(m.concat(), (r, c), &DEVICE).unwrap()
}

/// Reads a rank-2 tensor (or the trailing two axes of a rank-k tensor with unit
/// leading axes) into nested vectors.
pub fn to_mat(t: &Tensor) -> Mat {
    let dims = t.dims();
    let cols = *dims.last().unwrap();
    to_f64_vec(t).unwrap().chunks(cols).map(|r| r.to_vec()).collect()
}

pub fn param_mat(p: &Param) -> Mat {
    to_mat(p.var().as_tensor())
}

pub fn param_vec(p: &Param) -> Vec<f64> {
    to_f64_vec(p.var().as_tensor()).unwrap()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for l in 0..k {
                s += a[i][l] * b[l][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn add_bias(mut a: Mat, b: &[f64]) -> Mat {
    for row in &mut a {
        for (x, y) in row.iter_mut().zip(b) {
            *x += y;
        }
    }
    a
}

pub fn softmax_rows(logits: &Mat) -> Mat {
    logits
        .iter()
        .map(|row| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        })
        .collect()
}

pub fn layer_norm(x: &Mat, w: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * w[i] + b[i])
                .collect()
        })
        .collect()
}

fn columns(m: &Mat, start: usize, len: usize) -> Mat {
    m.iter().map(|r| r[start..start + len].to_vec()).collect()
}

/// `softmax(q_h k_h^T / sqrt(d_h))` for each head `h`.
pub fn head_maps(q: &Mat, k: &Mat, heads: usize) -> Vec<Mat> {
    let hd = q[0].len() / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    (0..heads)
        .map(|h| {
            let mut logits = vec![vec![0.0; k.len()]; q.len()];
            for i in 0..q.len() {
                for j in 0..k.len() {
                    let mut s = 0.0;
                    for d in 0..hd {
                        s += q[i][h * hd + d] * k[j][h * hd + d];
                    }
                    logits[i][j] = s * scale;
                }
            }
            softmax_rows(&logits)
        })
        .collect()
}

/// `maps[h] @ v_h`, heads concatenated on the feature axis.
pub fn apply_maps(maps: &[Mat], v: &Mat) -> Mat {
    let heads = maps.len();
    let hd = v[0].len() / heads;
    let n = maps[0].len();
    let mut out = vec![vec![0.0; heads * hd]; n];
    for (h, map) in maps.iter().enumerate() {
        for i in 0..n {
            for d in 0..hd {
                let mut s = 0.0;
                for j in 0..v.len() {
                    s += map[i][j] * v[j][h * hd + d];
                }
                out[i][h * hd + d] = s;
            }
        }
    }
    out
}

/// Scaled dot-product attention with `Q = query W_q`, `K = kv W_k`, `V = kv W_v`.
pub fn attention(query: &Mat, kv: &Mat, wq: &Mat, wk: &Mat, wv: &Mat, heads: usize) -> (Mat, Vec<Mat>) {
    let q = matmul(query, wq);
    let k = matmul(kv, wk);
    let v = matmul(kv, wv);
    let maps = head_maps(&q, &k, heads);
    (apply_maps(&maps, &v), maps)
}

/// `M_g[i][j] = softmax_j(sum_k E_f[i][k] E[j][k])`.
pub fn global_map(e_f: &Mat, e: &Mat) -> Mat {
    let mut logits = vec![vec![0.0; e.len()]; e_f.len()];
    for i in 0..e_f.len() {
        for j in 0..e.len() {
            let mut s = 0.0;
            for k in 0..e[0].len() {
                s += e_f[i][k] * e[j][k];
            }
            logits[i][j] = s;
        }
    }
    softmax_rows(&logits)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn flat(m: &Mat) -> Vec<f64> {
    m.concat()
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        input_len: 32,
        horizon: 8,
        text_len: 16,
        d_t: 8,
        ts_heads: 2,
        ..ModelConfig::default()
    }
}

pub fn tiny_backbone(seed: u64) -> BackboneSpec {
    BackboneSpec::stub(2, 8, 2, seed)
}

/// Tiny stub-backed model and a three-window batch from the default synthetic series.
pub fn tiny_model(cfg: &ModelConfig, seed: u64) -> (Model, Batch) {
    let s = generate(&SyntheticSpec {
        rows: 200,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let desc = compose_descriptions(&[], &s.channel_names, &compute_channel_stats(&s)).unwrap();
    let m = Model::new(cfg, &tiny_backbone(seed), &s.channel_names, Some(&desc), seed).unwrap();
    let w = make_windows(&s, cfg.input_len, cfg.horizon, 1).unwrap();
    let b = w.batch(&[0, 5, 9], DType::F64).unwrap();
    (m, b)
}

/// Prints the criterion verdict in the fixed `PASS|FAIL criterion N: ...` form.
pub fn verdict(n: u32, what: &str, ok: bool, detail: &str) -> bool {
    let tag = if ok { "PASS" } else { "FAIL" };
    println!("{tag} criterion {n}: {what} ({detail})");
    ok
}
