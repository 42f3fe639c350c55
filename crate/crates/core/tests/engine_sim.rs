use ladder_core::collective::{CostModel, TimingMode};
use ladder_core::costsim::{simulate, ComputeModel, SimSetup};
use ladder_core::engine::{
    collectives_in_layer, compute_lane_is_serial, from_ndjson, to_chrome_trace, to_ndjson, Engine, EngineConfig, Lane,
};
use ladder_core::model::{reference_generate, Arch, ModelConfig, TokenBatch, Weights};
use ladder_core::rng::NormalRng;

const ARCHS: [Arch; 6] = [
    Arch::Standard,
    Arch::Ladder,
    Arch::Parallel,
    Arch::UpperBound,
    Arch::Hybrid(1),
    Arch::Hybrid(3),
];

fn cfg() -> ModelConfig {
    ModelConfig::preset("tiny").unwrap().with_layers(4)
}

fn prompt(seed: u64, batch: usize, seq: usize, vocab: usize) -> TokenBatch {
    TokenBatch::new(batch, NormalRng::new(seed).token_ids(batch * seq, vocab)).unwrap()
}

fn costs() -> Vec<CostModel> {
    vec![
        CostModel::latency(3.0, TimingMode::Simulated),
        CostModel {
            base_latency_us: 0.5,
            per_byte_ns: 2.0,
            p2p_enabled: false,
            p2p_disabled_multiplier: 3.0,
            mode: TimingMode::Simulated,
        },
        CostModel::free(TimingMode::Simulated),
    ]
}

fn computes() -> Vec<ComputeModel> {
    vec![
        ComputeModel::uniform(2000.0),
        ComputeModel {
            flops_per_ns: Some(20.0),
            kernel_overhead_ns: 100.0,
            attention_weight: 1.5,
        },
    ]
}

#[test]
fn simulated_engine_matches_the_event_simulator() {
    let cfg = cfg();
    let w = Weights::init_random(&cfg, 5).unwrap();
    let p = prompt(6, 2, 6, cfg.vocab_size);
    let gen_len = 5;
    for world in [1, 2, 4] {
        for cost in costs() {
            for compute in computes() {
                let mut opts = EngineConfig::new(world, cost);
                opts.compute = compute;
                opts.timing_only = true;
                let engine = Engine::new(&cfg, &w, opts).unwrap();
                let setup = SimSetup {
                    cfg: cfg.clone(),
                    world,
                    batch: 2,
                    prompt_len: 6,
                    gen_len,
                    compute,
                    cost,
                };
                let report = simulate(&ARCHS, &setup).unwrap();
                for arch in ARCHS {
                    let g = engine.generate(arch, &p, gen_len).unwrap();
                    let v = report.get(arch).unwrap();
                    assert_eq!(
                        (g.metrics.prefill_ns, g.metrics.decode_ns),
                        (v.prefill_ns, v.decode_ns),
                        "{arch} world {world} {cost:?} {compute:?}"
                    );
                    assert!((g.metrics.tokens_per_second - v.tokens_per_second).abs() <= 1e-9 * v.tokens_per_second);
                }
            }
        }
    }
}

#[test]
fn traces_are_well_formed() {
    let cfg = cfg();
    let w = Weights::init_random(&cfg, 8).unwrap();
    let p = prompt(9, 1, 4, cfg.vocab_size);
    let mut opts = EngineConfig::new(2, costs()[1]);
    opts.compute = ComputeModel::uniform(1500.0);
    opts.trace = true;
    let engine = Engine::new(&cfg, &w, opts).unwrap();
    for arch in [Arch::Standard, Arch::Ladder, Arch::Parallel, Arch::Hybrid(2)] {
        let g = engine.generate(arch, &p, 3).unwrap();
        let t = &g.trace;
        assert!(compute_lane_is_serial(t), "{arch}");
        assert!(t.iter().all(|e| e.end_ns >= e.start_ns && e.rank < 2));
        assert!(t
            .windows(2)
            .all(|w| (w[0].rank, w[0].start_ns) <= (w[1].rank, w[1].start_ns)));
        assert!(t.iter().all(|e| e.is_collective() == (e.lane == Lane::Communication)));
        // one prefill and two decode forwards
        let per_layer = if arch == Arch::Parallel { 1 } else { 2 };
        for l in 0..cfg.n_layers {
            assert_eq!(collectives_in_layer(t, 0, l), 3 * per_layer, "{arch} layer {l}");
        }
        assert_eq!(&from_ndjson(&to_ndjson(t)).unwrap(), t);
        let chrome = to_chrome_trace(t);
        let events = chrome["traceEvents"].as_array().unwrap();
        let spans: Vec<_> = events.iter().filter(|e| e["ph"] == "X").collect();
        assert_eq!(spans.len(), t.len());
        assert!(spans.iter().all(|e| e["dur"].as_f64().unwrap() >= 0.0));
    }
}

#[test]
fn hybrid_extremes_reproduce_their_endpoints() {
    let cfg = cfg();
    let w = Weights::init_random(&cfg, 11).unwrap();
    let p = prompt(12, 2, 5, cfg.vocab_size);
    let mut opts = EngineConfig::new(2, costs()[0]);
    opts.compute = ComputeModel::uniform(1000.0);
    let engine = Engine::new(&cfg, &w, opts).unwrap();
    for (hybrid, plain) in [
        (Arch::Hybrid(0), Arch::Standard),
        (Arch::Hybrid(cfg.n_layers), Arch::Ladder),
    ] {
        let a = engine.generate(hybrid, &p, 4).unwrap();
        let b = engine.generate(plain, &p, 4).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert!(a.step_logits.iter().zip(&b.step_logits).all(|(x, y)| x.bit_eq(y)));
        assert_eq!(a.metrics, b.metrics);
    }
}

#[test]
fn engine_generation_follows_the_reference() {
    for arch in [Arch::Standard, Arch::Ladder, Arch::Parallel, Arch::Hybrid(2)] {
        let cfg = cfg().with_arch(arch).unwrap();
        let w = Weights::init_random(&cfg, 21).unwrap();
        let p = prompt(22, 2, 4, cfg.vocab_size);
        let want = reference_generate(&cfg, &w, &p, 6).unwrap();
        let engine = Engine::new(&cfg, &w, EngineConfig::new(4, CostModel::free(TimingMode::Simulated))).unwrap();
        let got = engine.generate(arch, &p, 6).unwrap();
        assert_eq!(got.tokens, want.tokens, "{arch}");
        for (x, y) in got.step_logits.iter().zip(&want.step_logits) {
            assert!(x.max_abs_diff(y) <= 1e-4, "{arch}");
        }
    }
}
