use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{Context, Result};
use ladder_core::collective::{CostModel, TimingMode};
use ladder_core::costsim::{
    breakdown_markdown, pareto_markdown, rows_from_report, simulate, speedup_table_markdown, sweep, sweep_markdown,
    to_csv, ForwardTimeline, SimReport, SimSetup, SpeedupRow, SweepGrid, VariantReport,
};
use ladder_core::engine::{overlapping_collectives, to_chrome_trace, to_ndjson, Engine, EngineConfig};
use ladder_core::model::{decode_bytes, encode_bytes, Arch, ModelConfig, TokenBatch, Weights};
use ladder_core::rng::NormalRng;
use ladder_core::verify;
use serde_json::json;

use crate::args::{
    arch_list, list, parse_arch, BenchArgs, FileConfig, GenerateArgs, InitArgs, RunConfig, SimulateArgs, TraceArgs,
    VerifyArgs, ENGINE_DEFAULTS, SIM_DEFAULTS,
};
use crate::UsageError;

const ALL_ARCHS: &str = "standard,ladder,parallel,upper-bound";

fn load_weights(cfg: &RunConfig) -> Result<Weights> {
    Ok(match &cfg.weights {
        Some(path) => Weights::load(path, &cfg.model).with_context(|| format!("loading {}", path.display()))?,
        None => Weights::init_random(&cfg.model, cfg.seed)?,
    })
}

fn engine(cfg: &RunConfig, weights: &Weights, timing_only: bool, trace: bool) -> Result<Engine> {
    let mut opts = EngineConfig::new(cfg.world, cfg.cost);
    opts.compute = cfg.compute;
    opts.timing_only = timing_only;
    opts.trace = trace;
    Ok(Engine::new(&cfg.model, weights, opts)?)
}

fn random_prompt(cfg: &RunConfig) -> Result<TokenBatch> {
    let ids = NormalRng::new(cfg.seed ^ 0x5eed_f1d5).token_ids(cfg.batch * cfg.prompt_len, cfg.model.vocab_size);
    Ok(TokenBatch::new(cfg.batch, ids)?)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn ms(ns: u64) -> f64 {
    ns as f64 / 1e6
}

fn timing_name(mode: TimingMode) -> &'static str {
    match mode {
        TimingMode::Wallclock => "wallclock",
        TimingMode::Simulated => "simulated",
    }
}

pub fn init(args: InitArgs) -> Result<ExitCode> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let cfg = RunConfig::resolve(&args.common, &file, &ENGINE_DEFAULTS)?;
    let mut model = cfg.model.clone();
    if let Some(layers) = args.layers {
        model = model.with_layers(layers);
    }
    if let Some(arch) = args.arch.as_deref().or(file.arch.as_deref()) {
        let arch = parse_arch(arch)?;
        if arch == Arch::UpperBound {
            return Err(UsageError("upper-bound is a timing variant, not a model wiring".into()).into());
        }
        model = model.with_arch(arch)?;
    }
    model.validate()?;
    let weights = Weights::init_random(&model, cfg.seed)?;
    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    let config_path = args.out_dir.join("config.json");
    let weights_path = args.out_dir.join("weights.bin");
    model.save(&config_path)?;
    weights.save(&weights_path)?;
    println!("wrote {}", config_path.display());
    println!("wrote {}", weights_path.display());
    Ok(ExitCode::SUCCESS)
}

pub fn generate(args: GenerateArgs) -> Result<ExitCode> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let cfg = RunConfig::resolve(&args.common, &file, &ENGINE_DEFAULTS)?;
    let arch = parse_arch(args.arch.as_deref().or(file.arch.as_deref()).unwrap_or("ladder"))?;
    if arch == Arch::UpperBound {
        return Err(UsageError(
            "upper-bound drops every all-reduce and produces no valid tokens; use bench, simulate or trace".into(),
        )
        .into());
    }
    let prompt = match (&args.prompt, &args.text) {
        (Some(ids), _) => {
            let ids = ids
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<u32>()
                        .map_err(|_| UsageError(format!("bad token id {s:?}")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            TokenBatch::single(&ids)?
        }
        (None, Some(text)) => TokenBatch::single(&encode_bytes(text))?,
        (None, None) => random_prompt(&cfg)?,
    };
    if let Some(&bad) = prompt.ids.iter().find(|&&t| t as usize >= cfg.model.vocab_size) {
        return Err(UsageError(format!(
            "token {bad} is outside the vocabulary of {}",
            cfg.model.vocab_size
        ))
        .into());
    }
    let weights = load_weights(&cfg)?;
    let out = engine(&cfg, &weights, false, false)?.generate(arch, &prompt, cfg.gen_len)?;
    let m = out.metrics;
    if args.json {
        let mut v = json!({
            "arch": arch.to_string(),
            "world": cfg.world,
            "batch": prompt.batch,
            "prompt_len": prompt.seq_len,
            "gen_len": cfg.gen_len,
            "timing": timing_name(cfg.timing()),
            "tokens": out.tokens,
            "prefill_ms": ms(m.prefill_ns),
            "decode_ms": ms(m.decode_ns),
            "tokens_per_second": m.tokens_per_second,
        });
        if args.text.is_some() {
            v["text"] = json!(decode_bytes(&out.tokens[0]));
        }
        println!("{}", serde_json::to_string_pretty(&v)?);
    } else {
        println!(
            "arch={arch} world={} batch={} prompt_len={} gen_len={} timing={}",
            cfg.world,
            prompt.batch,
            prompt.seq_len,
            cfg.gen_len,
            timing_name(cfg.timing())
        );
        for (i, seq) in out.tokens.iter().enumerate() {
            let ids: Vec<String> = seq.iter().map(u32::to_string).collect();
            println!("seq {i}: {}", ids.join(" "));
        }
        if args.text.is_some() {
            println!("text: {:?}", decode_bytes(&out.tokens[0]));
        }
        println!(
            "prefill_ms={:.3} decode_ms={:.3} tok_per_s={:.1}",
            ms(m.prefill_ns),
            ms(m.decode_ns),
            m.tokens_per_second
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn median(mut xs: Vec<u64>) -> u64 {
    xs.sort_unstable();
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2
    }
}

fn variant_report(arch: Arch, prefill_ns: u64, decode_ns: u64, tokens: usize) -> VariantReport {
    let total = prefill_ns + decode_ns;
    VariantReport {
        arch,
        prefill_ns,
        decode_ns,
        tokens_per_second: if total == 0 {
            0.0
        } else {
            tokens as f64 / (total as f64 / 1e9)
        },
        speedup_vs_standard: 1.0,
        collectives: 0,
        comm_cost_ns: 0,
        prefill: ForwardTimeline::default(),
        last_decode: None,
    }
}

pub fn bench(args: BenchArgs) -> Result<ExitCode> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let cfg = RunConfig::resolve(&args.common, &file, &ENGINE_DEFAULTS)?;
    let mut archs = arch_list(&args.archs, &file.archs, ALL_ARCHS)?;
    if !archs.contains(&Arch::Standard) {
        archs.insert(0, Arch::Standard);
    }
    let repeats = args.repeats.or(file.repeats).unwrap_or(5);
    let warmup = args.warmup.or(file.warmup).unwrap_or(2);
    if repeats < 5 {
        return Err(UsageError(format!("--repeats must be at least 5, got {repeats}")).into());
    }
    let weights = load_weights(&cfg)?;
    let engine = engine(&cfg, &weights, true, false)?;
    let prompt = random_prompt(&cfg)?;
    let mut variants = Vec::with_capacity(archs.len());
    for &arch in &archs {
        for _ in 0..warmup {
            engine.generate(arch, &prompt, cfg.gen_len)?;
        }
        let (mut pre, mut dec) = (Vec::new(), Vec::new());
        for _ in 0..repeats {
            let m = engine.generate(arch, &prompt, cfg.gen_len)?.metrics;
            pre.push(m.prefill_ns);
            dec.push(m.decode_ns);
        }
        variants.push(variant_report(arch, median(pre), median(dec), cfg.batch * cfg.gen_len));
    }
    let base = variants
        .iter()
        .find(|v| v.arch == Arch::Standard)
        .map(|v| v.total_ns())
        .unwrap_or(0);
    for v in &mut variants {
        v.speedup_vs_standard = if v.total_ns() == 0 {
            1.0
        } else {
            base as f64 / v.total_ns() as f64
        };
    }
    let report = SimReport {
        world: cfg.world,
        batch: cfg.batch,
        prompt_len: cfg.prompt_len,
        gen_len: cfg.gen_len,
        variants,
    };
    let csv = to_csv(&rows_from_report(&report, 0));
    match &args.out {
        Some(path) => {
            write(path, &csv)?;
            eprintln!("wrote {}", path.display());
        }
        None => print!("{csv}"),
    }
    if let Some(path) = &args.markdown {
        let label = format!("{} (P2P={})", cfg.preset, u8::from(cfg.cost.p2p_enabled));
        write(path, &breakdown_markdown(&[(label, &report)]))?;
        eprintln!("wrote {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn p2p_label(cost: &CostModel) -> String {
    format!("P2P={}", u8::from(cost.p2p_enabled))
}

pub fn simulate_cmd(args: SimulateArgs) -> Result<ExitCode> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let mut cfg = RunConfig::resolve(&args.common, &file, &SIM_DEFAULTS)?;
    cfg.cost.mode = TimingMode::Simulated;
    let archs = arch_list(&args.archs, &file.archs, ALL_ARCHS)?;
    let worlds: Vec<usize> = list(&args.worlds, &file.worlds, "1,2,4,8", "world size")?;
    let batches: Vec<usize> = list(&args.batches, &file.batches, "1,4,16,64", "batch size")?;
    if worlds.contains(&0) || batches.contains(&0) {
        return Err(UsageError("world and batch sizes must be positive".into()).into());
    }
    let models: Vec<(String, ModelConfig)> = if args.common.model_config.is_some() || file.model_config.is_some() {
        vec![("custom".into(), cfg.model.clone())]
    } else {
        let single = args.common.preset.clone().or_else(|| file.preset.clone());
        let default = single.unwrap_or_else(|| "1B,3B,8B,70B".into());
        let names: Vec<String> = if args.presets.is_none() && file.presets.is_some() {
            file.presets.clone().unwrap_or_default()
        } else {
            list(&args.presets, &None, &default, "preset")?
        };
        names
            .into_iter()
            .map(|n| ModelConfig::preset(&n).map(|c| (n, c)))
            .collect::<ladder_core::Result<_>>()?
    };
    let costs = if args.compare_p2p {
        vec![
            CostModel {
                p2p_enabled: true,
                ..cfg.cost
            },
            CostModel {
                p2p_enabled: false,
                ..cfg.cost
            },
        ]
    } else {
        vec![cfg.cost]
    };

    let out = &args.out_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut sweep_md = String::new();
    let mut pareto_md = String::new();
    for (name, model) in &models {
        for cost in &costs {
            let base = SimSetup {
                cfg: model.clone(),
                world: cfg.world,
                batch: cfg.batch,
                prompt_len: cfg.prompt_len,
                gen_len: cfg.gen_len,
                compute: cfg.compute,
                cost: *cost,
            };
            let grid = SweepGrid {
                worlds: worlds.clone(),
                batches: batches.clone(),
                costs: vec![*cost],
            };
            let rows = sweep(&archs, &base, &grid)?;
            let path = out.join(format!("sweep_{name}_p2p{}.csv", u8::from(cost.p2p_enabled)));
            write(&path, &to_csv(&rows))?;
            println!("wrote {}", path.display());
            let _ = writeln!(sweep_md, "## {name}, {}\n\n{}", p2p_label(cost), sweep_markdown(&rows));
            let _ = writeln!(
                pareto_md,
                "## {name}, {}\n\n{}",
                p2p_label(cost),
                pareto_markdown(&rows)
            );
        }
    }
    for (file_name, text) in [("sweep.md", &sweep_md), ("pareto.md", &pareto_md)] {
        let path = out.join(file_name);
        write(&path, text)?;
        println!("wrote {}", path.display());
    }

    if args.compare_p2p {
        let table_archs = [Arch::Standard, Arch::UpperBound, Arch::Parallel, Arch::Ladder];
        let mut speedups = Vec::new();
        let mut reports: Vec<(String, SimReport)> = Vec::new();
        for (name, model) in &models {
            let mut by_cost = Vec::new();
            for cost in &costs {
                let setup = SimSetup {
                    cfg: model.clone(),
                    world: cfg.world,
                    batch: cfg.batch,
                    prompt_len: cfg.prompt_len,
                    gen_len: cfg.gen_len,
                    compute: cfg.compute,
                    cost: *cost,
                };
                let r = simulate(&table_archs, &setup)?;
                by_cost.push(r.get(Arch::Ladder).map_or(1.0, |v| v.speedup_vs_standard));
                reports.push((format!("{name} ({})", p2p_label(cost)), r));
            }
            speedups.push(SpeedupRow {
                model: name.clone(),
                p2p_enabled: by_cost[0],
                p2p_disabled: by_cost[1],
            });
        }
        let table = speedup_table_markdown(&speedups);
        let sections: Vec<(String, &SimReport)> = reports.iter().map(|(l, r)| (l.clone(), r)).collect();
        let breakdown = breakdown_markdown(&sections);
        for (file_name, text) in [("speedup.md", &table), ("breakdown.md", &breakdown)] {
            let path = out.join(file_name);
            write(&path, text)?;
            println!("wrote {}", path.display());
        }
        println!(
            "\nladder speedup, world {} batch {}, prompt {} gen {}\n\n{table}",
            cfg.world, cfg.batch, cfg.prompt_len, cfg.gen_len
        );
    }
    Ok(ExitCode::SUCCESS)
}

pub fn trace(args: TraceArgs) -> Result<ExitCode> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let cfg = RunConfig::resolve(&args.common, &file, &ENGINE_DEFAULTS)?;
    let arch = parse_arch(args.arch.as_deref().or(file.arch.as_deref()).unwrap_or("ladder"))?;
    let weights = load_weights(&cfg)?;
    let prompt = random_prompt(&cfg)?;
    let out = engine(&cfg, &weights, true, true)?.generate(arch, &prompt, cfg.gen_len)?;
    write(&args.out, &to_ndjson(&out.trace))?;
    println!("wrote {} ({} events)", args.out.display(), out.trace.len());
    if let Some(path) = &args.chrome {
        write(path, &serde_json::to_string(&to_chrome_trace(&out.trace))?)?;
        println!("wrote {}", path.display());
    }
    for rank in 0..cfg.world {
        println!(
            "rank {rank}: {} collectives overlapped with compute",
            overlapping_collectives(&out.trace, rank)
        );
    }
    println!(
        "prefill_ms={:.3} decode_ms={:.3}",
        ms(out.metrics.prefill_ns),
        ms(out.metrics.decode_ns)
    );
    Ok(ExitCode::SUCCESS)
}

pub fn verify_cmd(args: VerifyArgs) -> Result<ExitCode> {
    let results = verify::run_all();
    let failed = results.iter().filter(|r| !r.passed).count();
    if args.json {
        println!("{}", serde_json::to_string_pretty(&results)?);
    } else {
        for r in &results {
            println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        }
        println!("verify: {} passed, {failed} failed", results.len() - failed);
    }
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even_counts() {
        assert_eq!(median(vec![5, 1, 3]), 3);
        assert_eq!(median(vec![4, 1, 3, 2]), 2);
        assert_eq!(median(vec![7; 5]), 7);
    }

    #[test]
    fn throughput_counts_every_generated_token() {
        let v = variant_report(Arch::Ladder, 250_000_000, 750_000_000, 8);
        assert_eq!(v.total_ns(), 1_000_000_000);
        assert!((v.tokens_per_second - 8.0).abs() < 1e-12);
        assert_eq!(variant_report(Arch::Ladder, 0, 0, 8).tokens_per_second, 0.0);
    }
}
