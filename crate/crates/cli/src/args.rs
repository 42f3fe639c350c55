//! Command-line flags, the optional JSON config file, and their resolution
//! into one [`RunConfig`]. Precedence: flag, then config file, then default.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ladder_core::collective::{CostModel, TimingMode};
use ladder_core::costsim::ComputeModel;
use ladder_core::model::{Arch, ModelConfig};
use serde::Deserialize;

use crate::UsageError;

#[derive(Parser, Debug)]
#[command(
    name = "ladder",
    version,
    about = "Tensor-parallel inference with ladder residual wiring"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a model config and random weights to a directory.
    Init(InitArgs),
    /// Greedy generation on the multi-rank engine.
    Generate(GenerateArgs),
    /// Median phase timings over repeated engine runs, as CSV.
    Bench(BenchArgs),
    /// Event-simulator sweep over world size, batch size and cost model.
    Simulate(SimulateArgs),
    /// Run one generation and export its per-rank event trace.
    Trace(TraceArgs),
    /// Run the built-in equivalence and invariant checks.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Timing {
    Wallclock,
    Simulated,
}

impl From<Timing> for TimingMode {
    fn from(t: Timing) -> Self {
        match t {
            Timing::Wallclock => TimingMode::Wallclock,
            Timing::Simulated => TimingMode::Simulated,
        }
    }
}

/// Flags shared by every model-running command.
#[derive(Args, Debug, Default)]
pub struct Common {
    /// JSON file supplying defaults for any flag below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model size preset: tiny, small, 1B, 3B, 8B, 70B.
    #[arg(long)]
    pub preset: Option<String>,
    /// Model config JSON (as written by `init`); overrides --preset.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// Weights file (as written by `init`); random weights from --seed otherwise.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Tensor-parallel world size.
    #[arg(long)]
    pub world: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub prompt_len: Option<usize>,
    /// Tokens to generate (one from the prefill, the rest decoded).
    #[arg(long)]
    pub gen_len: Option<usize>,
    /// Fixed per-collective latency in microseconds.
    #[arg(long)]
    pub base_latency_us: Option<f64>,
    /// Per-byte collective cost in nanoseconds.
    #[arg(long)]
    pub per_byte_ns: Option<f64>,
    /// Peer-to-peer transfers enabled (true) or disabled (false).
    #[arg(long)]
    pub p2p: Option<bool>,
    /// Collective cost multiplier applied when p2p is disabled.
    #[arg(long)]
    pub p2p_disabled_multiplier: Option<f64>,
    #[arg(long, value_enum)]
    pub timing: Option<Timing>,
    /// Simulated compute throughput per rank; `inf` leaves only the overhead.
    #[arg(long)]
    pub flops_per_ns: Option<f64>,
    /// Simulated fixed cost of every module.
    #[arg(long)]
    pub kernel_overhead_ns: Option<f64>,
    /// Simulated weight of attention-score FLOPs.
    #[arg(long)]
    pub attention_weight: Option<f64>,
}

#[derive(Args, Debug)]
pub struct InitArgs {
    #[command(flatten)]
    pub common: Common,
    /// Architecture recorded in the config's per-layer wiring.
    #[arg(long)]
    pub arch: Option<String>,
    /// Override the preset's layer count.
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long, default_value = "model")]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    /// standard, ladder, parallel or hybrid:k (last k layers ladder).
    #[arg(long)]
    pub arch: Option<String>,
    /// Comma-separated prompt token ids (one sequence).
    #[arg(long, conflicts_with = "text")]
    pub prompt: Option<String>,
    /// Prompt text, tokenized byte by byte.
    #[arg(long)]
    pub text: Option<String>,
    /// Print a JSON object instead of text.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: Common,
    /// Comma-separated architectures; standard is always included.
    #[arg(long)]
    pub archs: Option<String>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    /// CSV destination; stdout otherwise.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the per-phase improvement table here.
    #[arg(long)]
    pub markdown: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub archs: Option<String>,
    /// Comma-separated presets to sweep.
    #[arg(long)]
    pub presets: Option<String>,
    /// Comma-separated world sizes.
    #[arg(long)]
    pub worlds: Option<String>,
    /// Comma-separated batch sizes.
    #[arg(long)]
    pub batches: Option<String>,
    /// Sweep both p2p settings and write the speedup and breakdown tables.
    #[arg(long)]
    pub compare_p2p: bool,
    #[arg(long, default_value = "sim_out")]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct TraceArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long, default_value = "trace.ndjson")]
    pub out: PathBuf,
    /// Also write a Chrome trace-event JSON file.
    #[arg(long)]
    pub chrome: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long)]
    pub json: bool,
}

/// Everything a config file may set.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub preset: Option<String>,
    pub model_config: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub seed: Option<u64>,
    pub world: Option<usize>,
    pub batch: Option<usize>,
    pub prompt_len: Option<usize>,
    pub gen_len: Option<usize>,
    pub base_latency_us: Option<f64>,
    pub per_byte_ns: Option<f64>,
    pub p2p: Option<bool>,
    pub p2p_disabled_multiplier: Option<f64>,
    pub timing: Option<Timing>,
    pub flops_per_ns: Option<f64>,
    pub kernel_overhead_ns: Option<f64>,
    pub attention_weight: Option<f64>,
    pub arch: Option<String>,
    pub archs: Option<Vec<String>>,
    pub presets: Option<Vec<String>>,
    pub worlds: Option<Vec<usize>>,
    pub batches: Option<Vec<usize>>,
    pub repeats: Option<usize>,
    pub warmup: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| UsageError(format!("bad config {}: {e}", path.display())).into())
    }
}

/// Per-command defaults that differ from the shared ones.
pub struct Defaults {
    pub world: usize,
    pub batch: usize,
    pub timing: Timing,
}

pub const ENGINE_DEFAULTS: Defaults = Defaults {
    world: 2,
    batch: 1,
    timing: Timing::Wallclock,
};

/// Simulation defaults follow the reference measurement: 8 ranks, batch 4.
pub const SIM_DEFAULTS: Defaults = Defaults {
    world: 8,
    batch: 4,
    timing: Timing::Simulated,
};

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub preset: String,
    pub weights: Option<PathBuf>,
    pub seed: u64,
    pub world: usize,
    pub batch: usize,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub cost: CostModel,
    pub compute: ComputeModel,
}

impl RunConfig {
    pub fn resolve(flags: &Common, file: &FileConfig, d: &Defaults) -> anyhow::Result<Self> {
        let base_cost = CostModel::default();
        let base_compute = ComputeModel::default();
        let preset = pick(&flags.preset, &file.preset, "tiny".to_string());
        let model = match flags.model_config.as_ref().or(file.model_config.as_ref()) {
            Some(path) => ModelConfig::load(path)?,
            None => ModelConfig::preset(&preset)?,
        };
        let timing = pick(&flags.timing, &file.timing, d.timing);
        let flops = pick(
            &flags.flops_per_ns,
            &file.flops_per_ns,
            base_compute.flops_per_ns.unwrap_or(f64::INFINITY),
        );
        let cfg = Self {
            model,
            preset,
            weights: flags.weights.clone().or_else(|| file.weights.clone()),
            seed: pick(&flags.seed, &file.seed, 0),
            world: pick(&flags.world, &file.world, d.world),
            batch: pick(&flags.batch, &file.batch, d.batch),
            prompt_len: pick(&flags.prompt_len, &file.prompt_len, 1024),
            gen_len: pick(&flags.gen_len, &file.gen_len, 512),
            cost: CostModel {
                base_latency_us: pick(&flags.base_latency_us, &file.base_latency_us, base_cost.base_latency_us),
                per_byte_ns: pick(&flags.per_byte_ns, &file.per_byte_ns, base_cost.per_byte_ns),
                p2p_enabled: pick(&flags.p2p, &file.p2p, base_cost.p2p_enabled),
                p2p_disabled_multiplier: pick(
                    &flags.p2p_disabled_multiplier,
                    &file.p2p_disabled_multiplier,
                    base_cost.p2p_disabled_multiplier,
                ),
                mode: timing.into(),
            },
            compute: ComputeModel {
                flops_per_ns: flops.is_finite().then_some(flops),
                kernel_overhead_ns: pick(
                    &flags.kernel_overhead_ns,
                    &file.kernel_overhead_ns,
                    base_compute.kernel_overhead_ns,
                ),
                attention_weight: pick(
                    &flags.attention_weight,
                    &file.attention_weight,
                    base_compute.attention_weight,
                ),
            },
        };
        if cfg.world == 0 || cfg.batch == 0 {
            return Err(UsageError("--world and --batch must be positive".into()).into());
        }
        if cfg.prompt_len == 0 {
            return Err(UsageError("--prompt-len must be positive".into()).into());
        }
        cfg.cost.validate()?;
        cfg.compute.validate()?;
        Ok(cfg)
    }

    pub fn timing(&self) -> TimingMode {
        self.cost.mode
    }
}

pub fn pick<T: Clone>(flag: &Option<T>, file: &Option<T>, default: T) -> T {
    flag.clone().or_else(|| file.clone()).unwrap_or(default)
}

pub fn parse_arch(s: &str) -> anyhow::Result<Arch> {
    Ok(s.trim().parse::<Arch>()?)
}

/// Comma-separated list from a flag, else the config file's list, else `default`.
pub fn list<T: std::str::FromStr + Clone>(
    flag: &Option<String>,
    file: &Option<Vec<T>>,
    default: &str,
    what: &str,
) -> anyhow::Result<Vec<T>> {
    if flag.is_none() {
        if let Some(v) = file {
            return Ok(v.clone());
        }
    }
    let raw = flag.as_deref().unwrap_or(default);
    let items = raw
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|_| UsageError(format!("bad {what} {s:?}"))))
        .collect::<Result<Vec<_>, _>>()?;
    if items.is_empty() {
        return Err(UsageError(format!("empty {what} list")).into());
    }
    Ok(items)
}

pub fn arch_list(flag: &Option<String>, file: &Option<Vec<String>>, default: &str) -> anyhow::Result<Vec<Arch>> {
    list::<String>(flag, file, default, "architecture")?
        .iter()
        .map(|s| parse_arch(s))
        .collect()
}
