//! Single-threaded reference forwards: the ground truth the distributed
//! engine is checked against.
//!
//! Modules are numbered `0..2·n_layers` (attention `2l`, MLP `2l+1`). With
//! `x` the residual stream:
//!
//! * standard: `x ← x + h_i(x)` after every module;
//! * ladder: module `i` reads the residual from before module `i-1`'s update
//!   was applied, so `x_i = x_{i-1} + h_i(x_{i-2})`. At the start of a ladder
//!   run both pending updates are zero (equivalently `x_{-1} := x_0`); after
//!   the run ends both outstanding updates are added back in order;
//! * parallel: `x ← x + (attn(n) + mlp(n))` with `n = norm(x)` shared.

use super::block::{self, StepGeometry};
use super::config::{ModelConfig, Variant};
use super::kv::KvCache;
use super::weights::Weights;
use super::TokenBatch;
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// One residual update as it was applied.
#[derive(Clone, Debug)]
pub struct ModuleRecord {
    pub module: usize,
    pub residual_before: Tensor,
    pub update: Tensor,
    pub residual_after: Tensor,
}

impl ModuleRecord {
    /// `‖update‖ / ‖residual before the update‖`.
    pub fn update_ratio(&self) -> f32 {
        self.update.l2_norm() / self.residual_before.l2_norm()
    }
}

/// Greedy generation result. `step_logits[j]` holds the last-position logits
/// (`[batch × vocab]`) that produced `tokens[·][j]`; the final entry of a
/// run with `n_new` tokens has no token attached when `n_new == 0`.
#[derive(Clone, Debug)]
pub struct Generation {
    pub tokens: Vec<Vec<u32>>,
    pub step_logits: Vec<Tensor>,
}

type Pending = [Option<(usize, Tensor)>; 2];

struct Recorder<'r>(Option<&'r mut Vec<ModuleRecord>>);

impl Recorder<'_> {
    fn apply(&mut self, x: &mut Tensor, module: usize, update: Tensor) -> Result<()> {
        let before = self.0.is_some().then(|| x.clone());
        tensor::add_assign(x, &update)?;
        if let (Some(records), Some(residual_before)) = (self.0.as_deref_mut(), before) {
            records.push(ModuleRecord {
                module,
                residual_before,
                update,
                residual_after: x.clone(),
            });
        }
        Ok(())
    }

    /// Applies a pending ladder update; an empty slot is a zero update.
    fn apply_pending(&mut self, x: &mut Tensor, slot: Option<(usize, Tensor)>) -> Result<()> {
        match slot {
            Some((module, update)) => self.apply(x, module, update),
            None => tensor::add_assign(x, &Tensor::zeros(x.shape())),
        }
    }

    fn drain(&mut self, x: &mut Tensor, pending: Option<Pending>) -> Result<()> {
        if let Some([attn, mlp]) = pending {
            self.apply_pending(x, attn)?;
            self.apply_pending(x, mlp)?;
        }
        Ok(())
    }
}

/// Reference model with its own KV cache for incremental decoding.
pub struct ReferenceModel<'a> {
    cfg: &'a ModelConfig,
    weights: &'a Weights,
    cache: KvCache,
}

impl<'a> ReferenceModel<'a> {
    pub fn new(cfg: &'a ModelConfig, weights: &'a Weights, batch: usize, max_len: usize) -> Result<Self> {
        cfg.validate()?;
        weights.validate(cfg)?;
        Ok(Self {
            cfg,
            weights,
            cache: KvCache::new(cfg.n_layers, batch, max_len, cfg.kv_width()),
        })
    }

    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }

    /// Runs the new tokens through the stack; returns logits for every new
    /// position, `[batch·seq × vocab]`.
    pub fn step(&mut self, tokens: &TokenBatch) -> Result<Tensor> {
        self.step_recorded(tokens, None)
    }

    pub fn step_recorded(&mut self, tokens: &TokenBatch, records: Option<&mut Vec<ModuleRecord>>) -> Result<Tensor> {
        if tokens.batch != self.cache.batch() {
            return Err(Error::config(format!(
                "token batch {} differs from cache batch {}",
                tokens.batch,
                self.cache.batch()
            )));
        }
        self.cache.ensure_room(tokens.seq_len)?;
        let cfg = self.cfg;
        let g = StepGeometry::new(cfg, 1, tokens.batch, tokens.seq_len, self.cache.len());
        let mut rec = Recorder(records);
        let mut x = tensor::embed_lookup(&self.weights.token_embedding, &tokens.ids)?;
        let mut pending: Option<Pending> = None;

        for (l, (w, variant)) in self.weights.layers.iter().zip(&cfg.variant_per_layer).enumerate() {
            let kv = self.cache.layer_mut(l);
            let (m_attn, m_mlp) = (2 * l, 2 * l + 1);
            match variant {
                Variant::Standard => {
                    rec.drain(&mut x, pending.take())?;
                    let u = block::attention_module(&x, w, &g, kv)?;
                    rec.apply(&mut x, m_attn, u)?;
                    let u = block::mlp_module(&x, w, &g)?;
                    rec.apply(&mut x, m_mlp, u)?;
                }
                Variant::ParallelAttnMlp => {
                    rec.drain(&mut x, pending.take())?;
                    let u = block::parallel_module(&x, w, &g, kv)?;
                    rec.apply(&mut x, m_attn, u)?;
                }
                Variant::Ladder => {
                    let [prev_attn, prev_mlp] = pending.take().unwrap_or([None, None]);
                    rec.apply_pending(&mut x, prev_attn)?;
                    let a = block::attention_module(&x, w, &g, kv)?;
                    rec.apply_pending(&mut x, prev_mlp)?;
                    let m = block::mlp_module(&x, w, &g)?;
                    pending = Some([Some((m_attn, a)), Some((m_mlp, m))]);
                }
            }
        }
        rec.drain(&mut x, pending.take())?;
        self.cache.advance(tokens.seq_len);
        block::head(&x, &self.weights.final_norm, &self.weights.lm_head, cfg.norm_eps)
    }
}

fn require(cfg: &ModelConfig, variant: Variant, name: &str) -> Result<()> {
    if !cfg.all(variant) {
        return Err(Error::config(format!("{name} requires every layer tagged {variant:?}")));
    }
    Ok(())
}

/// Full-sequence forward for any mix of layer variants.
pub fn reference_forward(cfg: &ModelConfig, weights: &Weights, tokens: &TokenBatch) -> Result<Tensor> {
    ReferenceModel::new(cfg, weights, tokens.batch, tokens.seq_len)?.step(tokens)
}

pub fn reference_forward_standard(cfg: &ModelConfig, weights: &Weights, tokens: &TokenBatch) -> Result<Tensor> {
    require(cfg, Variant::Standard, "standard forward")?;
    reference_forward(cfg, weights, tokens)
}

pub fn reference_forward_ladder(cfg: &ModelConfig, weights: &Weights, tokens: &TokenBatch) -> Result<Tensor> {
    require(cfg, Variant::Ladder, "ladder forward")?;
    reference_forward(cfg, weights, tokens)
}

pub fn reference_forward_parallel(cfg: &ModelConfig, weights: &Weights, tokens: &TokenBatch) -> Result<Tensor> {
    require(cfg, Variant::ParallelAttnMlp, "parallel forward")?;
    reference_forward(cfg, weights, tokens)
}

pub fn reference_forward_hybrid(cfg: &ModelConfig, weights: &Weights, tokens: &TokenBatch) -> Result<Tensor> {
    reference_forward(cfg, weights, tokens)
}

/// Forward that also returns every applied residual update.
pub fn reference_forward_instrumented(
    cfg: &ModelConfig,
    weights: &Weights,
    tokens: &TokenBatch,
) -> Result<(Tensor, Vec<ModuleRecord>)> {
    let mut records = Vec::new();
    let mut model = ReferenceModel::new(cfg, weights, tokens.batch, tokens.seq_len)?;
    let logits = model.step_recorded(tokens, Some(&mut records))?;
    Ok((logits, records))
}

/// Rows `seq-1, 2·seq-1, …`: the last position of every sequence.
pub fn last_positions(logits: &Tensor, batch: usize) -> Result<Tensor> {
    let seq = logits.rows() / batch;
    let rows = (0..batch)
        .map(|b| logits.row_block(b * seq + seq - 1, 1))
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_rows(&rows)
}

fn pick(logits: &Tensor) -> Vec<u32> {
    tensor::argmax_last(logits).into_iter().map(|i| i as u32).collect()
}

/// Greedy decoding with the KV cache: prefill, then one token per step.
pub fn reference_generate(
    cfg: &ModelConfig,
    weights: &Weights,
    prompt: &TokenBatch,
    n_new: usize,
) -> Result<Generation> {
    let capacity = prompt.seq_len + n_new;
    let mut model = ReferenceModel::new(cfg, weights, prompt.batch, capacity)?;
    let mut step_logits = vec![last_positions(&model.step(prompt)?, prompt.batch)?];
    let mut tokens = vec![Vec::with_capacity(n_new); prompt.batch];
    for j in 0..n_new {
        let next = pick(&step_logits[j]);
        for (seq, &t) in tokens.iter_mut().zip(&next) {
            seq.push(t);
        }
        if j + 1 < n_new {
            let logits = model.step(&TokenBatch::new(prompt.batch, next)?)?;
            step_logits.push(last_positions(&logits, prompt.batch)?);
        }
    }
    Ok(Generation { tokens, step_logits })
}

/// Greedy decoding that re-runs a full prefill over the growing sequence at
/// every step, with no cache reuse. Oracle for [`reference_generate`].
pub fn reference_generate_by_prefill(
    cfg: &ModelConfig,
    weights: &Weights,
    prompt: &TokenBatch,
    n_new: usize,
) -> Result<Generation> {
    let mut seqs: Vec<Vec<u32>> = prompt.sequences().map(<[u32]>::to_vec).collect();
    let mut tokens = vec![Vec::with_capacity(n_new); prompt.batch];
    let mut step_logits = Vec::with_capacity(n_new.max(1));
    for j in 0..n_new.max(1) {
        let batch = TokenBatch::from_sequences(&seqs)?;
        let logits = last_positions(&reference_forward(cfg, weights, &batch)?, prompt.batch)?;
        if j < n_new {
            for ((seq, out), t) in seqs.iter_mut().zip(tokens.iter_mut()).zip(pick(&logits)) {
                seq.push(t);
                out.push(t);
            }
        }
        step_logits.push(logits);
    }
    Ok(Generation { tokens, step_logits })
}
