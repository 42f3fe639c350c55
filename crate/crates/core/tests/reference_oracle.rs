mod common;

use ladder_core::model::{
    reference_forward, reference_forward_instrumented, reference_forward_ladder, reference_forward_parallel,
    reference_forward_standard, reference_generate, reference_generate_by_prefill, Arch, ModelConfig, TokenBatch,
    Variant, Weights,
};
use ladder_core::rng::NormalRng;
use ladder_core::Error;

fn tiny(layers: usize) -> ModelConfig {
    ModelConfig::preset("tiny").unwrap().with_layers(layers)
}

fn prompt(seed: u64, batch: usize, seq: usize, vocab: usize) -> TokenBatch {
    TokenBatch::new(batch, NormalRng::new(seed).token_ids(batch * seq, vocab)).unwrap()
}

#[test]
fn every_wiring_matches_the_straight_line_oracle() {
    let archs = [
        Arch::Standard,
        Arch::Ladder,
        Arch::Parallel,
        Arch::Hybrid(1),
        Arch::Hybrid(2),
    ];
    for seed in [1, 2] {
        for arch in archs {
            let cfg = tiny(3).with_arch(arch).unwrap();
            let w = Weights::init_random(&cfg, seed).unwrap();
            let tokens = prompt(seed + 10, 2, 5, cfg.vocab_size);
            let got = common::mat(&reference_forward(&cfg, &w, &tokens).unwrap());
            let want = common::forward_batch(&cfg, &w, &tokens.ids, tokens.batch);
            let err = common::max_diff(&got, &want);
            assert!(err <= 1e-4, "{arch} seed {seed}: {err}");
        }
    }
}

#[test]
fn mixed_wirings_match_the_oracle() {
    let cfg = tiny(4)
        .with_variants(vec![
            Variant::Ladder,
            Variant::Standard,
            Variant::ParallelAttnMlp,
            Variant::Ladder,
        ])
        .unwrap();
    let w = Weights::init_random(&cfg, 9).unwrap();
    let tokens = prompt(3, 1, 7, cfg.vocab_size);
    let got = common::mat(&reference_forward(&cfg, &w, &tokens).unwrap());
    let want = common::forward(&cfg, &w, &tokens.ids);
    assert!(common::max_diff(&got, &want) <= 1e-4);
}

#[test]
fn typed_entry_points_check_the_wiring() {
    let cfg = tiny(2).with_arch(Arch::Ladder).unwrap();
    let w = Weights::init_random(&cfg, 1).unwrap();
    let t = prompt(1, 1, 3, cfg.vocab_size);
    assert!(reference_forward_ladder(&cfg, &w, &t).is_ok());
    assert!(matches!(
        reference_forward_standard(&cfg, &w, &t),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        reference_forward_parallel(&cfg, &w, &t),
        Err(Error::Config(_))
    ));
}

#[test]
fn ladder_mlp_reads_the_stale_residual() {
    // two-layer ladder: the second attention reads x0 + attn0, never mlp0
    let cfg = tiny(2).with_arch(Arch::Ladder).unwrap();
    let w = Weights::init_random(&cfg, 4).unwrap();
    let t = prompt(2, 1, 4, cfg.vocab_size);
    let (_, records) = reference_forward_instrumented(&cfg, &w, &t).unwrap();
    assert_eq!(records.len(), 4);
    let x0 = &records[0].residual_before;
    // updates are applied in order, so residual_before of module 1 is x0 + attn0
    let after_attn0 = &records[0].residual_after;
    assert!(records[1].residual_before.bit_eq(after_attn0));
    let want = common::attention_module(&common::mat(after_attn0), &w.layers[1], &cfg);
    let got = common::mat(&records[2].update);
    assert!(common::max_diff(&got, &want) <= 1e-5);
    let mlp0 = common::mlp_module(&common::mat(x0), &w.layers[0], &cfg);
    assert!(common::max_diff(&common::mat(&records[1].update), &mlp0) <= 1e-5);
}

#[test]
fn cached_decoding_equals_repeated_prefill() {
    for arch in [Arch::Standard, Arch::Ladder, Arch::Parallel, Arch::Hybrid(1)] {
        let cfg = tiny(2).with_arch(arch).unwrap();
        let w = Weights::init_random(&cfg, 6).unwrap();
        let p = prompt(8, 2, 4, cfg.vocab_size);
        let a = reference_generate(&cfg, &w, &p, 6).unwrap();
        let b = reference_generate_by_prefill(&cfg, &w, &p, 6).unwrap();
        assert_eq!(a.tokens, b.tokens, "{arch}");
        for (x, y) in a.step_logits.iter().zip(&b.step_logits) {
            assert!(x.max_abs_diff(y) <= 1e-4, "{arch}");
        }
    }
}
