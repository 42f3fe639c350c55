use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Which half of a layer a compute cost refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModuleKind {
    Attention,
    Mlp,
}

/// Per-rank compute time of one module: `FLOPs / (world · throughput) + overhead`.
///
/// Attention FLOPs cover the four projections plus `attention_weight` times
/// the score/value products, which grow linearly with the cached length in
/// decode and quadratically over the prompt in prefill.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComputeModel {
    /// Sustained FLOPs per nanosecond per rank; `None` means infinitely fast,
    /// leaving only the fixed overhead.
    pub flops_per_ns: Option<f64>,
    /// Fixed cost per module launch.
    pub kernel_overhead_ns: f64,
    #[serde(default = "one")]
    pub attention_weight: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for ComputeModel {
    fn default() -> Self {
        Self {
            flops_per_ns: Some(50_000.0),
            kernel_overhead_ns: 15_000.0,
            attention_weight: 1.0,
        }
    }
}

impl ComputeModel {
    /// Every module costs exactly `ns`, whatever its shape.
    pub fn uniform(ns: f64) -> Self {
        Self {
            flops_per_ns: None,
            kernel_overhead_ns: ns,
            attention_weight: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.flops_per_ns.is_none_or(|f| f.is_finite() && f > 0.0)
            && self.kernel_overhead_ns.is_finite()
            && self.kernel_overhead_ns > 0.0
            && self.attention_weight.is_finite()
            && self.attention_weight >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(
                "compute model needs positive throughput, positive overhead and nonnegative attention weight",
            ))
        }
    }

    /// Whole-model FLOPs of one module for `new_tokens` per sequence against
    /// a context of `ctx_len` positions (including the new ones).
    pub fn module_flops(
        kind: ModuleKind,
        cfg: &ModelConfig,
        batch: usize,
        new_tokens: usize,
        ctx_len: usize,
        attention_weight: f64,
    ) -> f64 {
        let tokens = (batch * new_tokens) as f64;
        let (d, q, kv, ff) = (
            cfg.d_model as f64,
            cfg.q_width() as f64,
            cfg.kv_width() as f64,
            cfg.d_ff as f64,
        );
        match kind {
            ModuleKind::Attention => {
                let proj = 2.0 * tokens * d * (q + 2.0 * kv) + 2.0 * tokens * q * d;
                // causal (query, key) pairs per sequence
                let (n, c) = (new_tokens as f64, ctx_len as f64);
                let pairs = n * c - n * (n - 1.0) / 2.0;
                proj + attention_weight * 4.0 * batch as f64 * pairs * q
            }
            ModuleKind::Mlp => 6.0 * tokens * d * ff,
        }
    }

    /// Per-rank time in whole nanoseconds.
    pub fn module_ns(
        &self,
        kind: ModuleKind,
        cfg: &ModelConfig,
        world: usize,
        batch: usize,
        new_tokens: usize,
        ctx_len: usize,
    ) -> u64 {
        let work = match self.flops_per_ns {
            Some(rate) => {
                Self::module_flops(kind, cfg, batch, new_tokens, ctx_len, self.attention_weight) / (world as f64 * rate)
            }
            None => 0.0,
        };
        (work + self.kernel_overhead_ns).round() as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_ignores_shape() {
        let cfg = ModelConfig::preset("8B").unwrap();
        let m = ComputeModel::uniform(7.0);
        assert_eq!(m.module_ns(ModuleKind::Attention, &cfg, 1, 4, 100, 100), 7);
        assert_eq!(m.module_ns(ModuleKind::Mlp, &cfg, 8, 1, 1, 5000), 7);
    }

    #[test]
    fn decreasing_in_world_and_increasing_in_context() {
        let cfg = ModelConfig::preset("70B").unwrap();
        let m = ComputeModel::default();
        let at = |w, ctx| m.module_ns(ModuleKind::Attention, &cfg, w, 4, 1, ctx);
        assert!(at(1, 1024) > at(2, 1024) && at(2, 1024) > at(8, 1024));
        assert!(at(8, 2048) > at(8, 1024));
    }

    #[test]
    fn prefill_pairs_are_triangular() {
        let cfg = ModelConfig::preset("tiny").unwrap();
        let proj_only = ComputeModel::module_flops(ModuleKind::Attention, &cfg, 1, 3, 3, 0.0);
        let full = ComputeModel::module_flops(ModuleKind::Attention, &cfg, 1, 3, 3, 1.0);
        assert_eq!(full - proj_only, 4.0 * 6.0 * cfg.q_width() as f64);
    }
}
