//! Multi-rank tensor-parallel executor.
//!
//! Every rank runs on its own thread with its shard of the weights and its
//! own KV cache; the ranks meet only in the collective fabric. Layers are
//! scheduled per architecture:
//!
//! * standard: blocking all-reduce after attention and after the MLP;
//! * ladder: each module's all-reduce is issued asynchronously and waited
//!   only right before its output is added to the residual, one module
//!   later, so it overlaps the next module's compute;
//! * parallel: one fused attention+MLP step and one blocking all-reduce;
//! * upper bound: the standard schedule with every all-reduce dropped
//!   (timing only, numerically invalid).
//!
//! Entering a ladder run starts from two completed zero updates; leaving a
//! run (or reaching the head) waits on and applies both outstanding updates
//! in order. This matches the single-threaded reference exactly.
//!
//! In simulated mode every module advances the rank's virtual clock by its
//! [`ComputeModel`] time, so the measured phases equal the event simulator's.

mod trace;

pub use trace::{
    collectives_in_layer, compute_lane_is_serial, exposed_comm_ns, from_ndjson, overlapping_collectives, sort_events,
    to_chrome_trace, to_ndjson, Lane, TraceEvent, TraceSink,
};

use std::thread;

use crate::collective::{CostModel, Fabric, Handle, TimingMode};
use crate::costsim::{ComputeModel, ModuleKind};
use crate::error::{Error, Result};
use crate::model::block::{self, StepGeometry};
use crate::model::{last_positions, Arch, KvCache, ModelConfig, TokenBatch, Variant, Weights};
use crate::shard::{shard_weights, ShardedWeights};
use crate::tensor::{self, Tensor};

#[derive(Clone, Debug)]
pub struct EngineConfig {
    pub world: usize,
    pub cost: CostModel,
    /// Module times charged to the virtual clock in simulated mode.
    pub compute: ComputeModel,
    pub trace: bool,
    /// Required for the upper-bound architecture, whose outputs are invalid.
    pub timing_only: bool,
    /// Cache capacity limit per sequence; `None` sizes the cache to the request.
    pub max_seq_len: Option<usize>,
}

impl EngineConfig {
    pub fn new(world: usize, cost: CostModel) -> Self {
        Self {
            world,
            cost,
            compute: ComputeModel::default(),
            trace: false,
            timing_only: false,
            max_seq_len: None,
        }
    }
}

/// Per-rank state carried between layers. Each handle resolves to the
/// corresponding reduced module output (`attn_out`, `mlp_out`).
pub struct RankLayerState {
    pub residual: Tensor,
    pub attn_work: Handle,
    pub mlp_work: Handle,
    /// Layer that issued the handles; `None` for the zero handles at run entry.
    issued_by: Option<usize>,
}

impl RankLayerState {
    /// Run entry: both outputs zero, both handles already complete.
    pub fn entry(residual: Tensor) -> Self {
        let zeros = Tensor::zeros(residual.shape());
        Self {
            attn_work: Handle::noop(zeros.clone()),
            mlp_work: Handle::noop(zeros),
            residual,
            issued_by: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PhaseMetrics {
    pub prefill_ns: u64,
    pub decode_ns: u64,
    pub tokens_per_second: f64,
}

#[derive(Clone, Debug)]
pub struct EngineGeneration {
    pub tokens: Vec<Vec<u32>>,
    /// Last-position logits of each forward, as in the reference generation.
    pub step_logits: Vec<Tensor>,
    pub metrics: PhaseMetrics,
    pub trace: Vec<TraceEvent>,
    /// Peak number of simultaneously outstanding collectives per rank.
    pub max_outstanding: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct EngineForward {
    /// Logits for every position, `[batch·seq × vocab]`.
    pub logits: Tensor,
    pub elapsed_ns: u64,
    pub trace: Vec<TraceEvent>,
}

pub struct Engine {
    cfg: ModelConfig,
    shards: Vec<ShardedWeights>,
    opts: EngineConfig,
}

/// Execution context of one rank during one request.
struct Rank<'a> {
    rank: usize,
    world: usize,
    cfg: &'a ModelConfig,
    shard: &'a ShardedWeights,
    fabric: &'a Fabric,
    compute: &'a ComputeModel,
    simulated: bool,
    events: Option<Vec<TraceEvent>>,
    kv: KvCache,
}

impl Rank<'_> {
    fn module_ns(&self, kind: ModuleKind, g: &StepGeometry) -> u64 {
        if !self.simulated {
            return 0;
        }
        let ctx = g.start_pos + g.seq;
        self.compute.module_ns(kind, self.cfg, self.world, g.batch, g.seq, ctx)
    }

    fn timed<T>(
        &mut self,
        name: impl FnOnce() -> String,
        ns: u64,
        f: impl FnOnce(&mut Self) -> Result<T>,
    ) -> Result<T> {
        let start = self.fabric.now(self.rank);
        let out = f(self)?;
        self.fabric.advance(self.rank, ns);
        let end = self.fabric.now(self.rank);
        if let Some(events) = &mut self.events {
            let event = TraceEvent {
                rank: self.rank,
                name: name(),
                lane: Lane::Compute,
                start_ns: start,
                end_ns: end,
            };
            events.push(event);
        }
        Ok(out)
    }

    fn wait(&mut self, handle: &mut Handle, name: impl FnOnce() -> String) -> Result<Tensor> {
        let out = handle.wait()?;
        if let (Some(events), Some(span)) = (self.events.as_mut(), handle.span()) {
            events.push(TraceEvent {
                rank: self.rank,
                name: name(),
                lane: Lane::Communication,
                start_ns: span.start_ns,
                end_ns: span.end_ns,
            });
        }
        Ok(out)
    }

    fn sync(&mut self, partial: Tensor, name: impl FnOnce() -> String) -> Result<Tensor> {
        let mut h = self.fabric.all_reduce_async(self.rank, partial)?;
        self.wait(&mut h, name)
    }

    fn attention(&mut self, l: usize, residual: &Tensor, g: &StepGeometry) -> Result<Tensor> {
        let ns = self.module_ns(ModuleKind::Attention, g);
        self.timed(
            || format!("attn_compute L{l}"),
            ns,
            |r| block::attention_module(residual, &r.shard.layers[l], g, r.kv.layer_mut(l)),
        )
    }

    fn mlp(&mut self, l: usize, residual: &Tensor, g: &StepGeometry) -> Result<Tensor> {
        let ns = self.module_ns(ModuleKind::Mlp, g);
        self.timed(
            || format!("mlp_compute L{l}"),
            ns,
            |r| block::mlp_module(residual, &r.shard.layers[l], g),
        )
    }

    /// One ladder layer: wait, add, compute, issue; twice.
    fn run_layer_ladder(&mut self, state: RankLayerState, l: usize, g: &StepGeometry) -> Result<RankLayerState> {
        let RankLayerState {
            mut residual,
            mut attn_work,
            mut mlp_work,
            issued_by,
        } = state;
        let attn_prev = self.wait(&mut attn_work, || format!("allreduce L{}.attn", issued_by.unwrap_or(l)))?;
        tensor::add_assign(&mut residual, &attn_prev)?;
        let attn_out = self.attention(l, &residual, g)?;
        let attn_work = self.fabric.all_reduce_async(self.rank, attn_out)?;

        let mlp_prev = self.wait(&mut mlp_work, || format!("allreduce L{}.mlp", issued_by.unwrap_or(l)))?;
        tensor::add_assign(&mut residual, &mlp_prev)?;
        let mlp_out = self.mlp(l, &residual, g)?;
        let mlp_work = self.fabric.all_reduce_async(self.rank, mlp_out)?;
        Ok(RankLayerState {
            residual,
            attn_work,
            mlp_work,
            issued_by: Some(l),
        })
    }

    /// Waits on and applies both outstanding ladder updates.
    fn drain(&mut self, state: RankLayerState) -> Result<Tensor> {
        let RankLayerState {
            mut residual,
            mut attn_work,
            mut mlp_work,
            issued_by,
        } = state;
        let l = issued_by.unwrap_or(0);
        let a = self.wait(&mut attn_work, || format!("allreduce L{l}.attn"))?;
        tensor::add_assign(&mut residual, &a)?;
        let m = self.wait(&mut mlp_work, || format!("allreduce L{l}.mlp"))?;
        tensor::add_assign(&mut residual, &m)?;
        Ok(residual)
    }

    fn run_layer_standard(&mut self, mut residual: Tensor, l: usize, g: &StepGeometry) -> Result<Tensor> {
        let a = self.attention(l, &residual, g)?;
        let a = self.sync(a, || format!("allreduce L{l}.attn"))?;
        tensor::add_assign(&mut residual, &a)?;
        let m = self.mlp(l, &residual, g)?;
        let m = self.sync(m, || format!("allreduce L{l}.mlp"))?;
        tensor::add_assign(&mut residual, &m)?;
        Ok(residual)
    }

    /// Standard compute with each collective replaced by the local partial.
    fn run_layer_upper_bound(&mut self, mut residual: Tensor, l: usize, g: &StepGeometry) -> Result<Tensor> {
        let a = self.attention(l, &residual, g)?;
        tensor::add_assign(&mut residual, &a)?;
        let m = self.mlp(l, &residual, g)?;
        tensor::add_assign(&mut residual, &m)?;
        Ok(residual)
    }

    fn run_layer_parallel(&mut self, mut residual: Tensor, l: usize, g: &StepGeometry) -> Result<Tensor> {
        let ns = self.module_ns(ModuleKind::Attention, g) + self.module_ns(ModuleKind::Mlp, g);
        let u = self.timed(
            || format!("fused_compute L{l}"),
            ns,
            |r| block::parallel_module(&residual, &r.shard.layers[l], g, r.kv.layer_mut(l)),
        )?;
        let u = self.sync(u, || format!("allreduce L{l}.fused"))?;
        tensor::add_assign(&mut residual, &u)?;
        Ok(residual)
    }

    /// Full stack over the new tokens; logits for every new position.
    fn forward(&mut self, variants: &[Variant], comm_free: bool, tokens: &TokenBatch) -> Result<Tensor> {
        self.kv.ensure_room(tokens.seq_len)?;
        let g = StepGeometry::new(self.cfg, self.world, tokens.batch, tokens.seq_len, self.kv.len());
        let mut x = self.timed(
            || "embed".into(),
            0,
            |r| tensor::embed_lookup(&r.shard.token_embedding, &tokens.ids),
        )?;
        let mut ladder: Option<RankLayerState> = None;
        for (l, variant) in variants.iter().enumerate() {
            if *variant != Variant::Ladder {
                if let Some(state) = ladder.take() {
                    x = self.drain(state)?;
                }
            }
            match variant {
                Variant::Standard if comm_free => x = self.run_layer_upper_bound(x, l, &g)?,
                Variant::Standard => x = self.run_layer_standard(x, l, &g)?,
                Variant::ParallelAttnMlp => x = self.run_layer_parallel(x, l, &g)?,
                Variant::Ladder => {
                    let state = match ladder.take() {
                        Some(state) => state,
                        None => RankLayerState::entry(std::mem::replace(&mut x, Tensor::zeros(&[1]))),
                    };
                    ladder = Some(self.run_layer_ladder(state, l, &g)?);
                }
            }
        }
        if let Some(state) = ladder.take() {
            x = self.drain(state)?;
        }
        self.kv.advance(tokens.seq_len);
        let shard = self.shard;
        self.timed(
            || "head".into(),
            0,
            |_| block::head(&x, &shard.final_norm, &shard.lm_head, self.cfg.norm_eps),
        )
    }
}

/// Fails the fabric if a rank thread unwinds, so its peers stop waiting.
struct PoisonOnPanic<'a>(&'a Fabric);

impl Drop for PoisonOnPanic<'_> {
    fn drop(&mut self) {
        if thread::panicking() {
            self.0.poison("a rank panicked");
        }
    }
}

struct RankOutput<T> {
    value: T,
    /// Phase durations; wallclock values legitimately differ across ranks.
    times: [u64; 2],
    events: Vec<TraceEvent>,
    max_outstanding: usize,
}

impl Engine {
    pub fn new(cfg: &ModelConfig, weights: &Weights, opts: EngineConfig) -> Result<Self> {
        cfg.validate()?;
        weights.validate(cfg)?;
        opts.cost.validate()?;
        opts.compute.validate()?;
        let shards = shard_weights(cfg, weights, opts.world)?;
        Ok(Self {
            cfg: cfg.clone(),
            shards,
            opts,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.opts
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn plan(&self, arch: Arch) -> Result<(Vec<Variant>, bool)> {
        if arch.is_comm_free() && !self.opts.timing_only {
            return Err(Error::TimingOnly(
                "the upper-bound architecture drops every all-reduce; enable timing-only mode to run it",
            ));
        }
        Ok((arch.variants(self.cfg.n_layers)?, arch.is_comm_free()))
    }

    fn check_capacity(&self, needed: usize) -> Result<()> {
        match self.opts.max_seq_len {
            Some(capacity) if needed > capacity => Err(Error::Capacity { needed, capacity }),
            _ => Ok(()),
        }
    }

    /// Runs `body` on every rank concurrently; returns outputs in rank order.
    /// With `agree`, every rank must have produced the same value.
    fn run<T: Send + PartialEq>(
        &self,
        agree: bool,
        batch: usize,
        capacity: usize,
        body: impl Fn(&mut Rank<'_>) -> Result<(T, [u64; 2])> + Sync,
    ) -> Result<Vec<RankOutput<T>>> {
        let fabric = Fabric::new(self.opts.world, self.opts.cost)?;
        let simulated = self.opts.cost.mode == TimingMode::Simulated;
        let results: Vec<Result<RankOutput<T>>> = thread::scope(|s| {
            let workers: Vec<_> = self
                .shards
                .iter()
                .enumerate()
                .map(|(rank, shard)| {
                    let fabric = &fabric;
                    let body = &body;
                    thread::Builder::new()
                        .name(format!("rank-{rank}"))
                        .spawn_scoped(s, move || {
                            let _guard = PoisonOnPanic(fabric);
                            let mut ctx = Rank {
                                rank,
                                world: self.opts.world,
                                cfg: &self.cfg,
                                shard,
                                fabric,
                                compute: &self.opts.compute,
                                simulated,
                                events: self.opts.trace.then(Vec::new),
                                kv: KvCache::new(
                                    self.cfg.n_layers,
                                    batch,
                                    capacity,
                                    self.cfg.kv_width() / self.opts.world,
                                ),
                            };
                            match body(&mut ctx) {
                                Ok((value, times)) => Ok(RankOutput {
                                    value,
                                    times,
                                    events: ctx.events.take().unwrap_or_default(),
                                    max_outstanding: fabric.max_outstanding(rank),
                                }),
                                Err(e) => {
                                    fabric.poison(format!("rank {rank} failed: {e}"));
                                    Err(e)
                                }
                            }
                        })
                })
                .collect::<std::io::Result<_>>()
                .expect("spawn rank threads");
            workers
                .into_iter()
                .map(|w| {
                    w.join()
                        .unwrap_or_else(|_| Err(Error::Fabric("a rank panicked".into())))
                })
                .collect()
        });
        // report the root cause rather than a peer's poisoned-fabric error
        let mut first_err = None;
        let mut outputs = Vec::with_capacity(results.len());
        for r in results {
            match r {
                Ok(o) => outputs.push(o),
                Err(e) => {
                    if first_err.is_none() || matches!(first_err, Some(Error::Fabric(_))) {
                        first_err = Some(e);
                    }
                }
            }
        }
        if let Some(e) = first_err {
            return Err(e);
        }
        if agree && outputs.windows(2).any(|w| w[0].value != w[1].value) {
            return Err(Error::Fabric("ranks disagree on the replicated output".into()));
        }
        Ok(outputs)
    }

    fn merge_trace<T>(outputs: &mut [RankOutput<T>]) -> Vec<TraceEvent> {
        let sink = TraceSink::default();
        for o in outputs.iter_mut() {
            sink.extend(std::mem::take(&mut o.events));
        }
        sink.into_sorted()
    }

    /// One forward over a full batch of sequences.
    pub fn forward(&self, arch: Arch, tokens: &TokenBatch) -> Result<EngineForward> {
        let (variants, comm_free) = self.plan(arch)?;
        self.check_capacity(tokens.seq_len)?;
        let mut outputs = self.run(!comm_free, tokens.batch, tokens.seq_len, |r| {
            r.fabric.barrier(r.rank)?;
            let t0 = r.fabric.now(r.rank);
            let logits = r.forward(&variants, comm_free, tokens)?;
            r.fabric.barrier(r.rank)?;
            Ok((logits, [r.fabric.now(r.rank) - t0, 0]))
        })?;
        let trace = Self::merge_trace(&mut outputs);
        let RankOutput {
            value: logits, times, ..
        } = outputs.swap_remove(0);
        let elapsed_ns = times[0];
        Ok(EngineForward {
            logits,
            elapsed_ns,
            trace,
        })
    }

    /// Greedy generation: a prefill, then `n_new - 1` single-token decodes.
    pub fn generate(&self, arch: Arch, prompt: &TokenBatch, n_new: usize) -> Result<EngineGeneration> {
        let (variants, comm_free) = self.plan(arch)?;
        let capacity = prompt.seq_len + n_new;
        self.check_capacity(capacity)?;
        let batch = prompt.batch;
        let mut outputs = self.run(!comm_free, batch, capacity, |r| {
            let pick =
                |logits: &Tensor| -> Vec<u32> { tensor::argmax_last(logits).into_iter().map(|i| i as u32).collect() };
            r.fabric.barrier(r.rank)?;
            let t0 = r.fabric.now(r.rank);
            let logits = r.forward(&variants, comm_free, prompt)?;
            let mut step_logits = vec![last_positions(&logits, batch)?];
            r.fabric.barrier(r.rank)?;
            let t1 = r.fabric.now(r.rank);
            let mut tokens = vec![Vec::with_capacity(n_new); batch];
            for j in 0..n_new {
                let next = pick(&step_logits[j]);
                for (seq, &t) in tokens.iter_mut().zip(&next) {
                    seq.push(t);
                }
                if j + 1 < n_new {
                    let logits = r.forward(&variants, comm_free, &TokenBatch::new(batch, next)?)?;
                    step_logits.push(last_positions(&logits, batch)?);
                }
            }
            r.fabric.barrier(r.rank)?;
            let t2 = r.fabric.now(r.rank);
            Ok(((tokens, step_logits), [t1 - t0, t2 - t1]))
        })?;
        let trace = Self::merge_trace(&mut outputs);
        let max_outstanding = outputs.iter().map(|o| o.max_outstanding).collect();
        let RankOutput {
            value: (tokens, step_logits),
            times: [prefill_ns, decode_ns],
            ..
        } = outputs.swap_remove(0);
        let total = prefill_ns + decode_ns;
        let tokens_per_second = if total == 0 {
            0.0
        } else {
            (batch * n_new) as f64 * 1e9 / total as f64
        };
        Ok(EngineGeneration {
            tokens,
            step_logits,
            metrics: PhaseMetrics {
                prefill_ns,
                decode_ns,
                tokens_per_second,
            },
            trace,
            max_outstanding,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{reference_forward, reference_generate};

    fn tiny() -> (ModelConfig, Weights) {
        let cfg = ModelConfig::preset("tiny").unwrap();
        let w = Weights::init_random(&cfg, 5).unwrap();
        (cfg, w)
    }

    fn prompt() -> TokenBatch {
        TokenBatch::new(2, vec![1, 7, 42, 9, 200, 3, 3, 100]).unwrap()
    }

    fn free(world: usize) -> EngineConfig {
        EngineConfig::new(world, CostModel::free(TimingMode::Simulated))
    }

    #[test]
    fn world_one_is_bitwise_reference() {
        let (cfg, w) = tiny();
        for arch in [Arch::Standard, Arch::Ladder, Arch::Parallel, Arch::Hybrid(1)] {
            let engine = Engine::new(&cfg, &w, free(1)).unwrap();
            let got = engine.forward(arch, &prompt()).unwrap().logits;
            let want = reference_forward(&cfg.clone().with_arch(arch).unwrap(), &w, &prompt()).unwrap();
            assert!(got.bit_eq(&want), "{arch}");
        }
    }

    #[test]
    fn sharded_ranks_match_reference() {
        let (cfg, w) = tiny();
        for arch in [Arch::Standard, Arch::Ladder, Arch::Parallel] {
            let engine = Engine::new(&cfg, &w, free(4)).unwrap();
            let got = engine.forward(arch, &prompt()).unwrap().logits;
            let want = reference_forward(&cfg.clone().with_arch(arch).unwrap(), &w, &prompt()).unwrap();
            assert!(got.max_abs_diff(&want) <= 1e-4, "{arch}");
        }
    }

    #[test]
    fn generation_matches_reference_tokens() {
        let (cfg, w) = tiny();
        let engine = Engine::new(&cfg, &w, free(2)).unwrap();
        let got = engine.generate(Arch::Ladder, &prompt(), 5).unwrap();
        let want = reference_generate(&cfg.clone().with_arch(Arch::Ladder).unwrap(), &w, &prompt(), 5).unwrap();
        assert_eq!(got.tokens, want.tokens);
        assert_eq!(got.step_logits.len(), 5);
    }

    #[test]
    fn upper_bound_needs_timing_only() {
        let (cfg, w) = tiny();
        let engine = Engine::new(&cfg, &w, free(2)).unwrap();
        assert!(matches!(
            engine.forward(Arch::UpperBound, &prompt()),
            Err(Error::TimingOnly(_))
        ));
        let mut opts = free(2);
        opts.timing_only = true;
        opts.trace = true;
        let out = Engine::new(&cfg, &w, opts)
            .unwrap()
            .forward(Arch::UpperBound, &prompt())
            .unwrap();
        assert!(out.trace.iter().all(|e| e.lane == Lane::Compute));
    }

    #[test]
    fn capacity_is_checked_up_front() {
        let (cfg, w) = tiny();
        let mut opts = free(2);
        opts.max_seq_len = Some(6);
        let engine = Engine::new(&cfg, &w, opts).unwrap();
        assert!(matches!(
            engine.generate(Arch::Standard, &prompt(), 3),
            Err(Error::Capacity { needed: 7, capacity: 6 })
        ));
    }

    #[test]
    fn zero_new_tokens_has_no_decode() {
        let (cfg, w) = tiny();
        let mut opts = EngineConfig::new(2, CostModel::latency(3.0, TimingMode::Simulated));
        opts.compute = ComputeModel::uniform(1000.0);
        let g = Engine::new(&cfg, &w, opts)
            .unwrap()
            .generate(Arch::Ladder, &prompt(), 0)
            .unwrap();
        assert_eq!(g.metrics.decode_ns, 0);
        assert!(g.metrics.prefill_ns > 0);
        assert_eq!(g.step_logits.len(), 1);
        assert!(g.tokens.iter().all(Vec::is_empty));
    }

    #[test]
    fn ladder_keeps_at_most_two_collectives_in_flight() {
        let (cfg, w) = tiny();
        let mut opts = EngineConfig::new(2, CostModel::latency(3.0, TimingMode::Simulated));
        opts.compute = ComputeModel::uniform(1000.0);
        let g = Engine::new(&cfg, &w, opts)
            .unwrap()
            .generate(Arch::Ladder, &prompt(), 3)
            .unwrap();
        assert_eq!(g.max_outstanding, vec![2, 2]);
    }

    #[test]
    fn indivisible_world_is_rejected() {
        let (cfg, w) = tiny();
        assert!(Engine::new(&cfg, &w, free(3)).is_err());
    }
}
