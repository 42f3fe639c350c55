//! Fast end-to-end self-checks, run by `ladder verify`.
//!
//! Each check builds a small random model and compares two independent paths
//! through the library: the multi-rank engine against the reference forward,
//! cached decoding against re-running the prefill, the event simulator
//! against its closed-form steady state, and so on.

use serde::Serialize;

use crate::collective::{CostModel, TimingMode};
use crate::costsim::{simulate, simulate_forward, steady_state, ComputeModel, ForwardPlan, SimSetup};
use crate::engine::{compute_lane_is_serial, overlapping_collectives, Engine, EngineConfig};
use crate::model::block::{mlp_module, StepGeometry};
use crate::model::{
    reference_forward, reference_forward_instrumented, reference_generate, reference_generate_by_prefill, Arch,
    ModelConfig, TokenBatch, Variant, Weights,
};
use crate::rng::NormalRng;
use crate::shard::{shard_weights, unshard};
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn() -> Result<String>;

const CHECKS: [(&str, Check); 9] = [
    ("shard round trip", shard_round_trip),
    ("engine matches reference", engine_matches_reference),
    ("ladder reads stale residual", stale_residual),
    ("cached decode matches prefill", decode_matches_prefill),
    ("simulator matches steady state", simulator_matches_steady_state),
    ("upper bound conserves compute", upper_bound_conservation),
    ("hybrid endpoints", hybrid_endpoints),
    ("simulated engine matches simulator", engine_matches_simulator),
    ("determinism", determinism),
];

/// Names of every check, in run order.
pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|c| c.0).collect()
}

/// Runs every check; a failing check never stops the others.
pub fn run_all() -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|&(name, check)| match check() {
            Ok(detail) => CheckResult {
                name,
                passed: true,
                detail,
            },
            Err(e) => CheckResult {
                name,
                passed: false,
                detail: e.to_string(),
            },
        })
        .collect()
}

fn fail(msg: String) -> Error {
    Error::Config(format!("check failed: {msg}"))
}

fn tiny(layers: usize, arch: Arch) -> Result<ModelConfig> {
    ModelConfig::preset("tiny")?.with_layers(layers).with_arch(arch)
}

fn prompt(seed: u64, batch: usize, seq: usize, vocab: usize) -> Result<TokenBatch> {
    TokenBatch::new(batch, NormalRng::new(seed).token_ids(batch * seq, vocab))
}

fn sim_engine(world: usize, cost: CostModel, compute: ComputeModel) -> EngineConfig {
    let mut opts = EngineConfig::new(
        world,
        CostModel {
            mode: TimingMode::Simulated,
            ..cost
        },
    );
    opts.compute = compute;
    opts
}

fn shard_round_trip() -> Result<String> {
    let cfg = tiny(2, Arch::Standard)?;
    let w = Weights::init_random(&cfg, 1)?;
    for world in [1, 2, 4] {
        if unshard(&shard_weights(&cfg, &w, world)?)? != w {
            return Err(fail(format!("world {world}: unshard(shard(w)) != w")));
        }
    }
    Ok("worlds 1, 2, 4".into())
}

fn engine_matches_reference() -> Result<String> {
    let mut worst = 0.0f32;
    for arch in [Arch::Standard, Arch::Ladder, Arch::Parallel, Arch::Hybrid(1)] {
        let cfg = tiny(3, arch)?;
        let w = Weights::init_random(&cfg, 2)?;
        let t = prompt(3, 2, 5, cfg.vocab_size)?;
        let want = reference_forward(&cfg, &w, &t)?;
        for world in [1, 2, 4] {
            let engine = Engine::new(
                &cfg,
                &w,
                EngineConfig::new(world, CostModel::free(TimingMode::Simulated)),
            )?;
            let got = engine.forward(arch, &t)?.logits;
            let err = got.max_abs_diff(&want);
            if world == 1 && !got.bit_eq(&want) {
                return Err(fail(format!("{arch}: world 1 is not bitwise equal to the reference")));
            }
            if err > 1e-4 {
                return Err(fail(format!("{arch} world {world}: max abs err {err:.3e}")));
            }
            worst = worst.max(err);
        }
    }
    Ok(format!("max abs err {worst:.2e}"))
}

fn stale_residual() -> Result<String> {
    let cfg = tiny(2, Arch::Ladder)?;
    let w = Weights::init_random(&cfg, 4)?;
    let t = prompt(5, 1, 4, cfg.vocab_size)?;
    let (_, records) = reference_forward_instrumented(&cfg, &w, &t)?;
    // the first MLP reads x0, not x0 + attn0
    let g = StepGeometry::new(&cfg, 1, t.batch, t.seq_len, 0);
    let stale = mlp_module(&records[0].residual_before, &w.layers[0], &g)?;
    let fresh = mlp_module(&records[0].residual_after, &w.layers[0], &g)?;
    if !records[1].update.bit_eq(&stale) {
        return Err(fail("first MLP did not read the entry residual".into()));
    }
    if records[1].update.bit_eq(&fresh) {
        return Err(fail("first MLP saw the attention update".into()));
    }
    Ok("module i reads the residual after module i-2".into())
}

fn decode_matches_prefill() -> Result<String> {
    let mut worst = 0.0f32;
    for arch in [Arch::Standard, Arch::Ladder, Arch::Parallel] {
        let cfg = tiny(2, arch)?;
        let w = Weights::init_random(&cfg, 6)?;
        let p = prompt(7, 2, 4, cfg.vocab_size)?;
        let a = reference_generate(&cfg, &w, &p, 5)?;
        let b = reference_generate_by_prefill(&cfg, &w, &p, 5)?;
        if a.tokens != b.tokens {
            return Err(fail(format!("{arch}: cached tokens diverge")));
        }
        for (x, y) in a.step_logits.iter().zip(&b.step_logits) {
            worst = worst.max(x.max_abs_diff(y));
        }
    }
    if worst > 1e-4 {
        return Err(fail(format!("max logit divergence {worst:.3e}")));
    }
    Ok(format!("max logit divergence {worst:.2e}"))
}

fn simulator_matches_steady_state() -> Result<String> {
    let layers = 64;
    let mut worst = 0.0f64;
    for (m, c) in [(100u64, 0u64), (100, 50), (100, 100), (100, 250)] {
        for arch in Arch::BASELINES {
            let v = arch.variants(layers)?;
            let plan = ForwardPlan {
                variants: &v,
                comm_free: arch.is_comm_free(),
                m_attn: m,
                m_mlp: m,
                latency: 0,
                occupancy: c,
                record: false,
            };
            let per_module = simulate_forward(&plan).end as f64 / (2 * layers) as f64;
            let ss = steady_state(arch, m as f64, m as f64, c as f64)?;
            let rel = (per_module - ss).abs() / ss;
            if rel > 0.05 {
                return Err(fail(format!("{arch} m={m} c={c}: {per_module:.1} vs {ss:.1}")));
            }
            worst = worst.max(rel);
        }
    }
    Ok(format!("max rel gap {:.2}% at 64 layers", worst * 100.0))
}

fn upper_bound_conservation() -> Result<String> {
    let cfg = tiny(4, Arch::Standard)?;
    let setup = SimSetup {
        cfg,
        world: 2,
        batch: 2,
        prompt_len: 16,
        gen_len: 4,
        compute: ComputeModel::uniform(1000.0),
        cost: CostModel::latency(2.0, TimingMode::Simulated),
    };
    let r = simulate(&[Arch::Standard, Arch::UpperBound], &setup)?;
    let (std, ub) = (r.get(Arch::Standard), r.get(Arch::UpperBound));
    let (std, ub) = std.zip(ub).ok_or_else(|| fail("missing variant".into()))?;
    if ub.total_ns() + std.comm_cost_ns != std.total_ns() {
        return Err(fail(format!(
            "upper bound {} + comm {} != standard {}",
            ub.total_ns(),
            std.comm_cost_ns,
            std.total_ns()
        )));
    }
    if ub.collectives != 0 {
        return Err(fail(format!("upper bound issued {} collectives", ub.collectives)));
    }
    Ok(format!("{} ns of communication removed exactly", std.comm_cost_ns))
}

fn hybrid_endpoints() -> Result<String> {
    let cfg = tiny(3, Arch::Standard)?;
    let w = Weights::init_random(&cfg, 8)?;
    let p = prompt(9, 1, 4, cfg.vocab_size)?;
    let engine = Engine::new(
        &cfg,
        &w,
        sim_engine(
            2,
            CostModel::latency(1.0, TimingMode::Simulated),
            ComputeModel::uniform(500.0),
        ),
    )?;
    for (hybrid, plain) in [(Arch::Hybrid(0), Arch::Standard), (Arch::Hybrid(3), Arch::Ladder)] {
        if hybrid.variants(3)? != plain.variants(3)? {
            return Err(fail(format!("{hybrid} wires differently from {plain}")));
        }
        let a = engine.generate(hybrid, &p, 3)?;
        let b = engine.generate(plain, &p, 3)?;
        let same = a.tokens == b.tokens && a.metrics == b.metrics;
        if !same || !a.step_logits.iter().zip(&b.step_logits).all(|(x, y)| x.bit_eq(y)) {
            return Err(fail(format!("{hybrid} differs from {plain}")));
        }
    }
    if Arch::Hybrid(2).variants(3)? != [Variant::Standard, Variant::Ladder, Variant::Ladder] {
        return Err(fail("hybrid:2 should ladder the last two layers".into()));
    }
    Ok("hybrid:0 = standard, hybrid:n = ladder".into())
}

fn engine_matches_simulator() -> Result<String> {
    let cfg = tiny(4, Arch::Standard)?;
    let w = Weights::init_random(&cfg, 10)?;
    let p = prompt(11, 2, 6, cfg.vocab_size)?;
    let cost = CostModel {
        base_latency_us: 1.0,
        per_byte_ns: 0.5,
        ..CostModel::free(TimingMode::Simulated)
    };
    let compute = ComputeModel::uniform(1500.0);
    let mut opts = sim_engine(2, cost, compute);
    opts.trace = true;
    opts.timing_only = true;
    let engine = Engine::new(&cfg, &w, opts)?;
    let setup = SimSetup {
        cfg: cfg.clone(),
        world: 2,
        batch: 2,
        prompt_len: 6,
        gen_len: 4,
        compute,
        cost,
    };
    let archs = [Arch::Standard, Arch::Ladder, Arch::Parallel, Arch::UpperBound];
    let report = simulate(&archs, &setup)?;
    for arch in archs {
        let g = engine.generate(arch, &p, 4)?;
        let v = report.get(arch).ok_or_else(|| fail(format!("{arch} missing")))?;
        if (g.metrics.prefill_ns, g.metrics.decode_ns) != (v.prefill_ns, v.decode_ns) {
            return Err(fail(format!(
                "{arch}: engine {}+{} ns, simulator {}+{} ns",
                g.metrics.prefill_ns, g.metrics.decode_ns, v.prefill_ns, v.decode_ns
            )));
        }
        if !compute_lane_is_serial(&g.trace) {
            return Err(fail(format!("{arch}: overlapping compute events")));
        }
        let overlapped = overlapping_collectives(&g.trace, 0);
        if arch == Arch::Standard && overlapped != 0 {
            return Err(fail(format!("standard overlapped {overlapped} collectives")));
        }
        if arch == Arch::Ladder && overlapped == 0 {
            return Err(fail("ladder overlapped no collectives".into()));
        }
    }
    Ok("prefill and decode times equal for 4 architectures".into())
}

fn determinism() -> Result<String> {
    let run = || -> Result<_> {
        let cfg = tiny(2, Arch::Ladder)?;
        let w = Weights::init_random(&cfg, 12)?;
        let p = prompt(13, 2, 3, cfg.vocab_size)?;
        let engine = Engine::new(
            &cfg,
            &w,
            sim_engine(
                2,
                CostModel::latency(1.0, TimingMode::Simulated),
                ComputeModel::uniform(100.0),
            ),
        )?;
        let g = engine.generate(Arch::Ladder, &p, 4)?;
        Ok((w, g.tokens, g.step_logits, g.metrics))
    };
    let a = run()?;
    let b = run()?;
    if a.0 != b.0 {
        return Err(fail("weights differ for the same seed".into()));
    }
    if a.1 != b.1 || a.3 != b.3 || !a.2.iter().zip(&b.2).all(|(x, y)| x.bit_eq(y)) {
        return Err(fail("generation differs between identical runs".into()));
    }
    Ok("weights, tokens, logits and simulated timings repeat exactly".into())
}
