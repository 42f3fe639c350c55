//! Straight-line `f64` oracle of the model, written independently of the
//! library's kernels and of its pending-update bookkeeping.
#![allow(dead_code)]

use ladder_core::model::{LayerWeights, ModelConfig, Variant, Weights};
use ladder_core::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    let cols = t.last_dim();
    t.data()
        .chunks(cols)
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect()
}

pub fn vec64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

pub fn max_abs(a: &Mat) -> f64 {
    a.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn max_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            let mut out = vec![0.0; n];
            for (k, &x) in row.iter().enumerate() {
                for (o, &y) in out.iter_mut().zip(&b[k]) {
                    *o += x * y;
                }
            }
            out
        })
        .collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn rmsnorm(x: &Mat, gain: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            row.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
        })
        .collect()
}

fn rope(x: &Mat, head_dim: usize, base: f64) -> Mat {
    x.iter()
        .enumerate()
        .map(|(pos, row)| {
            let mut out = row.clone();
            for h in 0..row.len() / head_dim {
                for j in 0..head_dim / 2 {
                    let theta = pos as f64 * base.powf(-2.0 * j as f64 / head_dim as f64);
                    let (a, b) = (row[h * head_dim + 2 * j], row[h * head_dim + 2 * j + 1]);
                    out[h * head_dim + 2 * j] = a * theta.cos() - b * theta.sin();
                    out[h * head_dim + 2 * j + 1] = a * theta.sin() + b * theta.cos();
                }
            }
            out
        })
        .collect()
}

/// Causal grouped-query attention over one whole sequence (positions 0..T),
/// on an already-normalized input.
pub fn attention(xn: &Mat, w: &LayerWeights, cfg: &ModelConfig) -> Mat {
    let hd = cfg.head_dim;
    let base = cfg.rope_base as f64;
    let q = rope(&matmul(xn, &mat(&w.wq)), hd, base);
    let k = rope(&matmul(xn, &mat(&w.wk)), hd, base);
    let v = matmul(xn, &mat(&w.wv));
    let group = cfg.n_heads / cfg.n_kv_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let t_len = xn.len();
    let mut out = vec![vec![0.0; cfg.n_heads * hd]; t_len];
    for t in 0..t_len {
        for h in 0..cfg.n_heads {
            let kh = h / group;
            let qv = &q[t][h * hd..(h + 1) * hd];
            let scores: Vec<f64> = (0..=t)
                .map(|j| {
                    qv.iter()
                        .zip(&k[j][kh * hd..(kh + 1) * hd])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        * scale
                })
                .collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (j, e) in exps.iter().enumerate() {
                for d in 0..hd {
                    out[t][h * hd + d] += e / z * v[j][kh * hd + d];
                }
            }
        }
    }
    matmul(&out, &mat(&w.wo))
}

/// SwiGLU on an already-normalized input.
pub fn mlp(xn: &Mat, w: &LayerWeights) -> Mat {
    let gate = matmul(xn, &mat(&w.w_gate));
    let up = matmul(xn, &mat(&w.w_up));
    let h: Mat = gate
        .iter()
        .zip(&up)
        .map(|(g, u)| g.iter().zip(u).map(|(a, b)| a / (1.0 + (-a).exp()) * b).collect())
        .collect();
    matmul(&h, &mat(&w.w_down))
}

pub fn attention_module(x: &Mat, w: &LayerWeights, cfg: &ModelConfig) -> Mat {
    attention(&rmsnorm(x, &vec64(&w.attn_norm), cfg.norm_eps as f64), w, cfg)
}

pub fn mlp_module(x: &Mat, w: &LayerWeights, cfg: &ModelConfig) -> Mat {
    mlp(&rmsnorm(x, &vec64(&w.mlp_norm), cfg.norm_eps as f64), w)
}

/// Logits for every position of one sequence.
///
/// Inside a ladder run with entry residual `x_0` and `x_k` the residual after
/// `k` updates, module `i` of the run reads `x_{i-1}` (module 0 reads `x_0`).
pub fn forward(cfg: &ModelConfig, weights: &Weights, ids: &[u32]) -> Mat {
    let table = mat(&weights.token_embedding);
    let mut x: Mat = ids.iter().map(|&i| table[i as usize].clone()).collect();
    let v = &cfg.variant_per_layer;
    let mut l = 0;
    while l < cfg.n_layers {
        let w = &weights.layers[l];
        match v[l] {
            Variant::Standard => {
                x = add(&x, &attention_module(&x, w, cfg));
                x = add(&x, &mlp_module(&x, w, cfg));
                l += 1;
            }
            Variant::ParallelAttnMlp => {
                let n = rmsnorm(&x, &vec64(&w.attn_norm), cfg.norm_eps as f64);
                x = add(&x, &add(&attention(&n, w, cfg), &mlp(&n, w)));
                l += 1;
            }
            Variant::Ladder => {
                let end = (l..cfg.n_layers)
                    .find(|&j| v[j] != Variant::Ladder)
                    .unwrap_or(cfg.n_layers);
                let mut xs = vec![x.clone()];
                for i in 0..2 * (end - l) {
                    let lw = &weights.layers[l + i / 2];
                    let input = &xs[i.saturating_sub(1)];
                    let h = if i % 2 == 0 {
                        attention_module(input, lw, cfg)
                    } else {
                        mlp_module(input, lw, cfg)
                    };
                    let next = add(&xs[i], &h);
                    xs.push(next);
                }
                x = xs.pop().expect("run is nonempty");
                l = end;
            }
        }
    }
    let n = rmsnorm(&x, &vec64(&weights.final_norm), cfg.norm_eps as f64);
    matmul(&n, &mat(&weights.lm_head))
}

/// Oracle logits for a row-major batch of equal-length sequences, stacked.
pub fn forward_batch(cfg: &ModelConfig, weights: &Weights, ids: &[u32], batch: usize) -> Mat {
    let seq = ids.len() / batch;
    ids.chunks(seq).flat_map(|s| forward(cfg, weights, s)).collect()
}
