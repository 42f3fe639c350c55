//! Megatron-style partitioning of layer weights across ranks.
//!
//! For every two-matmul block `(X·A)·B`, `A` is split by output columns and
//! `B` by the matching input rows, so `Σ_r (X·A_r)·B_r = (X·A)·B` and each
//! rank produces a partial sum that one all-reduce completes. Attention
//! splits are head-aligned: rank `r` owns query heads
//! `[r·n_heads/R, (r+1)·n_heads/R)` and the KV heads those queries read.
//! Norm gains, the embedding and the LM head are replicated.

use crate::error::{Error, Result};
use crate::model::{LayerWeights, ModelConfig, Weights};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShardSpec {
    pub world_size: usize,
    pub rank: usize,
}

impl ShardSpec {
    pub fn new(world_size: usize, rank: usize) -> Result<Self> {
        if world_size == 0 || rank >= world_size {
            return Err(Error::config(format!(
                "rank {rank} invalid for world size {world_size}"
            )));
        }
        Ok(Self { world_size, rank })
    }
}

/// Rejects configs whose head counts or MLP width do not split evenly.
pub fn check_divisibility(cfg: &ModelConfig, world: usize) -> Result<()> {
    if world == 0 {
        return Err(Error::config("world size must be positive"));
    }
    for (name, dim) in [
        ("n_heads", cfg.n_heads),
        ("n_kv_heads", cfg.n_kv_heads),
        ("d_ff", cfg.d_ff),
    ] {
        if dim % world != 0 {
            return Err(Error::config(format!(
                "{name} = {dim} is not divisible by world size {world}"
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShardedWeights {
    pub spec: ShardSpec,
    pub layers: Vec<LayerWeights>,
    pub token_embedding: Tensor,
    pub final_norm: Tensor,
    pub lm_head: Tensor,
}

fn split_layer(cfg: &ModelConfig, w: &LayerWeights, spec: ShardSpec) -> Result<LayerWeights> {
    let r = spec.rank;
    let q = cfg.q_width() / spec.world_size;
    let kv = cfg.kv_width() / spec.world_size;
    let ff = cfg.d_ff / spec.world_size;
    Ok(LayerWeights {
        attn_norm: w.attn_norm.clone(),
        wq: w.wq.columns(r * q, q)?,
        wk: w.wk.columns(r * kv, kv)?,
        wv: w.wv.columns(r * kv, kv)?,
        wo: w.wo.row_block(r * q, q)?,
        mlp_norm: w.mlp_norm.clone(),
        w_gate: w.w_gate.columns(r * ff, ff)?,
        w_up: w.w_up.columns(r * ff, ff)?,
        w_down: w.w_down.row_block(r * ff, ff)?,
    })
}

/// One `ShardedWeights` per rank, in rank order.
pub fn shard_weights(cfg: &ModelConfig, weights: &Weights, world: usize) -> Result<Vec<ShardedWeights>> {
    check_divisibility(cfg, world)?;
    weights.validate(cfg)?;
    (0..world)
        .map(|rank| {
            let spec = ShardSpec::new(world, rank)?;
            Ok(ShardedWeights {
                spec,
                layers: weights
                    .layers
                    .iter()
                    .map(|l| split_layer(cfg, l, spec))
                    .collect::<Result<_>>()?,
                token_embedding: weights.token_embedding.clone(),
                final_norm: weights.final_norm.clone(),
                lm_head: weights.lm_head.clone(),
            })
        })
        .collect()
}

/// Reassembles dense weights from a complete set of shards, in any order.
pub fn unshard(shards: &[ShardedWeights]) -> Result<Weights> {
    let first = shards.first().ok_or_else(|| Error::config("no shards to reassemble"))?;
    let world = first.spec.world_size;
    let mut by_rank: Vec<Option<&ShardedWeights>> = vec![None; world];
    for s in shards {
        if s.spec.world_size != world {
            return Err(Error::config(format!(
                "shard world sizes disagree: {} vs {world}",
                s.spec.world_size
            )));
        }
        let slot = &mut by_rank[s.spec.rank];
        if slot.is_some() {
            return Err(Error::config(format!("duplicate shard for rank {}", s.spec.rank)));
        }
        *slot = Some(s);
    }
    let ordered = by_rank
        .iter()
        .enumerate()
        .map(|(r, s)| s.ok_or_else(|| Error::config(format!("missing shard for rank {r}"))))
        .collect::<Result<Vec<_>>>()?;

    let n_layers = first.layers.len();
    let layers = (0..n_layers)
        .map(|l| {
            let parts: Vec<&LayerWeights> = ordered.iter().map(|s| &s.layers[l]).collect();
            let cols = |f: fn(&LayerWeights) -> &Tensor| {
                Tensor::concat_columns(&parts.iter().map(|p| f(p).clone()).collect::<Vec<_>>())
            };
            let rows = |f: fn(&LayerWeights) -> &Tensor| {
                Tensor::concat_rows(&parts.iter().map(|p| f(p).clone()).collect::<Vec<_>>())
            };
            Ok(LayerWeights {
                attn_norm: parts[0].attn_norm.clone(),
                wq: cols(|p| &p.wq)?,
                wk: cols(|p| &p.wk)?,
                wv: cols(|p| &p.wv)?,
                wo: rows(|p| &p.wo)?,
                mlp_norm: parts[0].mlp_norm.clone(),
                w_gate: cols(|p| &p.w_gate)?,
                w_up: cols(|p| &p.w_up)?,
                w_down: rows(|p| &p.w_down)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Weights {
        token_embedding: first.token_embedding.clone(),
        layers,
        final_norm: first.final_norm.clone(),
        lm_head: first.lm_head.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::NormalRng;
    use crate::tensor::matmul;

    fn tiny() -> ModelConfig {
        ModelConfig::preset("tiny").unwrap()
    }

    #[test]
    fn world_one_is_identity() {
        let w = Weights::init_random(&tiny(), 4).unwrap();
        let shards = shard_weights(&tiny(), &w, 1).unwrap();
        assert_eq!(shards.len(), 1);
        assert_eq!(shards[0].layers, w.layers);
        assert_eq!(unshard(&shards).unwrap(), w);
    }

    #[test]
    fn two_by_two_column_split() {
        let a = Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(a.columns(0, 1).unwrap().data(), &[1., 3.]);
        assert_eq!(a.columns(1, 1).unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn rank_sum_of_partial_products_matches_dense() {
        let mut rng = NormalRng::new(9);
        let (x, a, b) = (
            rng.tensor(&[3, 8], 1.0),
            rng.tensor(&[8, 16], 1.0),
            rng.tensor(&[16, 5], 1.0),
        );
        let dense = matmul(&matmul(&x, &a).unwrap(), &b).unwrap();
        let world = 4;
        let w = 16 / world;
        let mut acc: Option<Tensor> = None;
        for r in 0..world {
            let part = matmul(
                &matmul(&x, &a.columns(r * w, w).unwrap()).unwrap(),
                &b.row_block(r * w, w).unwrap(),
            )
            .unwrap();
            acc = Some(match acc {
                None => part,
                Some(s) => crate::tensor::add(&s, &part).unwrap(),
            });
        }
        let acc = acc.unwrap();
        let rel = acc.max_abs_diff(&dense) / dense.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!(rel <= 1e-4, "{rel}");
    }

    #[test]
    fn non_divisible_world_names_dimension() {
        let w = Weights::init_random(&tiny(), 1).unwrap();
        let err = shard_weights(&tiny(), &w, 3).unwrap_err().to_string();
        assert!(err.contains("n_heads"), "{err}");
        let mut cfg = tiny();
        cfg.d_ff = 190;
        assert!(check_divisibility(&cfg, 4).unwrap_err().to_string().contains("d_ff"));
    }

    #[test]
    fn shuffled_and_incomplete_shard_sets() {
        let w = Weights::init_random(&tiny(), 2).unwrap();
        let mut shards = shard_weights(&tiny(), &w, 4).unwrap();
        shards.reverse();
        shards.swap(0, 2);
        assert_eq!(unshard(&shards).unwrap(), w);
        shards.pop();
        assert!(unshard(&shards).unwrap_err().to_string().contains("missing shard"));
    }

    #[test]
    fn per_rank_head_counts() {
        let cfg = tiny();
        let w = Weights::init_random(&cfg, 2).unwrap();
        for world in [1, 2, 4] {
            for s in shard_weights(&cfg, &w, world).unwrap() {
                assert_eq!(s.layers[0].wq.shape()[1], cfg.n_heads / world * cfg.head_dim);
                assert_eq!(s.layers[0].wk.shape()[1], cfg.n_kv_heads / world * cfg.head_dim);
            }
        }
    }
}
