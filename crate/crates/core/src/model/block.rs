//! Attention and MLP modules over a (possibly sharded) set of layer weights.
//!
//! The same functions back the single-threaded reference and every rank of
//! the distributed engine: a rank simply passes its own column/row shards and
//! local head counts. Outputs are partial sums whenever the weights are a
//! shard, which is what the all-reduce completes.

use super::config::ModelConfig;
use super::kv::LayerKv;
use super::weights::LayerWeights;
use crate::error::Result;
use crate::tensor::{self, Tensor};

/// Shape of one forward step on one rank.
#[derive(Clone, Copy, Debug)]
pub struct StepGeometry {
    pub batch: usize,
    /// New positions per sequence in this step.
    pub seq: usize,
    /// Absolute position of the first new token (cache length before the step).
    pub start_pos: usize,
    /// Query heads held by this rank.
    pub n_heads: usize,
    /// KV heads held by this rank.
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub rope_base: f32,
    pub norm_eps: f32,
    pub scale: f32,
}

impl StepGeometry {
    pub fn new(cfg: &ModelConfig, world: usize, batch: usize, seq: usize, start_pos: usize) -> Self {
        Self {
            batch,
            seq,
            start_pos,
            n_heads: cfg.n_heads / world,
            n_kv_heads: cfg.n_kv_heads / world,
            head_dim: cfg.head_dim,
            rope_base: cfg.rope_base,
            norm_eps: cfg.norm_eps,
            scale: cfg.attention_scale(),
        }
    }
}

/// Attention on an already-normalized input `[batch·seq × d_model]`.
/// Writes this step's rotated keys and values into `kv` before attending.
pub fn attention(x: &Tensor, w: &LayerWeights, g: &StepGeometry, kv: &mut LayerKv) -> Result<Tensor> {
    let q = tensor::matmul(x, &w.wq)?;
    let k = tensor::matmul(x, &w.wk)?;
    let v = tensor::matmul(x, &w.wv)?;
    let positions: Vec<usize> = (0..g.batch).flat_map(|_| g.start_pos..g.start_pos + g.seq).collect();
    let q = tensor::rope_apply(&q, &positions, g.head_dim, g.rope_base)?;
    let k = tensor::rope_apply(&k, &positions, g.head_dim, g.rope_base)?;

    let kvw = k.last_dim();
    let visible = g.start_pos + g.seq;
    let mut per_seq = Vec::with_capacity(g.batch);
    for b in 0..g.batch {
        let rows = b * g.seq..(b + 1) * g.seq;
        kv.write(
            b,
            g.start_pos,
            &k.data()[rows.start * kvw..rows.end * kvw],
            &v.data()[rows.start * kvw..rows.end * kvw],
        );
        let (keys, values) = kv.prefix(b, visible);
        let qb = q.row_block(rows.start, g.seq)?;
        per_seq.push(tensor::causal_attention(
            &qb,
            &keys,
            &values,
            g.n_heads,
            g.n_kv_heads,
            g.scale,
        )?);
    }
    let attended = if per_seq.len() == 1 {
        per_seq.pop().expect("one sequence")
    } else {
        Tensor::concat_rows(&per_seq)?
    };
    tensor::matmul(&attended, &w.wo)
}

/// SwiGLU: `down(silu(gate(x)) ⊙ up(x))` on an already-normalized input.
pub fn mlp(x: &Tensor, w: &LayerWeights) -> Result<Tensor> {
    let gate = tensor::silu(&tensor::matmul(x, &w.w_gate)?);
    let up = tensor::matmul(x, &w.w_up)?;
    tensor::matmul(&tensor::mul(&gate, &up)?, &w.w_down)
}

/// `Attention(AttentionNorm(residual))`.
pub fn attention_module(residual: &Tensor, w: &LayerWeights, g: &StepGeometry, kv: &mut LayerKv) -> Result<Tensor> {
    let x = tensor::rmsnorm(residual, &w.attn_norm, g.norm_eps)?;
    attention(&x, w, g, kv)
}

/// `MLP(MLPNorm(residual))`.
pub fn mlp_module(residual: &Tensor, w: &LayerWeights, g: &StepGeometry) -> Result<Tensor> {
    let x = tensor::rmsnorm(residual, &w.mlp_norm, g.norm_eps)?;
    mlp(&x, w)
}

/// Both branches from one shared pre-norm (the attention norm), summed
/// locally as `attn + mlp`. `mlp_norm` is unused by this wiring.
pub fn parallel_module(residual: &Tensor, w: &LayerWeights, g: &StepGeometry, kv: &mut LayerKv) -> Result<Tensor> {
    let x = tensor::rmsnorm(residual, &w.attn_norm, g.norm_eps)?;
    let a = attention(&x, w, g, kv)?;
    let m = mlp(&x, w)?;
    tensor::add(&a, &m)
}

/// Final norm and (replicated) vocabulary projection.
pub fn head(residual: &Tensor, final_norm: &Tensor, lm_head: &Tensor, eps: f32) -> Result<Tensor> {
    tensor::matmul(&tensor::rmsnorm(residual, final_norm, eps)?, lm_head)
}
