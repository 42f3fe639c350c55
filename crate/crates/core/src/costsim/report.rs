use std::fmt::Write as _;

use serde::Serialize;

use super::compute::{ComputeModel, ModuleKind};
use super::des::{simulate_forward, ForwardPlan, ForwardTimeline};
use crate::collective::CostModel;
use crate::error::{Error, Result};
use crate::model::{Arch, ModelConfig};

/// One simulated generation run: a prefill over `prompt_len` tokens and
/// `gen_len - 1` single-token decode forwards.
#[derive(Clone, Debug)]
pub struct SimSetup {
    pub cfg: ModelConfig,
    pub world: usize,
    pub batch: usize,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub compute: ComputeModel,
    pub cost: CostModel,
}

impl SimSetup {
    pub fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        self.compute.validate()?;
        self.cost.validate()?;
        if self.world == 0 || self.batch == 0 || self.prompt_len == 0 {
            return Err(Error::config("world, batch and prompt_len must be positive"));
        }
        Ok(())
    }

    /// Bytes of one all-reduce for a forward over `seq` new tokens.
    pub fn collective_bytes(&self, seq: usize) -> usize {
        self.batch * seq * self.cfg.d_model * 4
    }

    /// Per-rank compute times of the attention and MLP modules.
    pub fn module_times(&self, seq: usize, ctx: usize) -> (u64, u64) {
        let c = &self.compute;
        (
            c.module_ns(ModuleKind::Attention, &self.cfg, self.world, self.batch, seq, ctx),
            c.module_ns(ModuleKind::Mlp, &self.cfg, self.world, self.batch, seq, ctx),
        )
    }

    /// Simulates one forward of `arch` over `seq` new tokens reaching a
    /// context of `ctx` positions.
    pub fn forward(&self, arch: Arch, seq: usize, ctx: usize, record: bool) -> Result<ForwardTimeline> {
        let variants = arch.variants(self.cfg.n_layers)?;
        let (m_attn, m_mlp) = self.module_times(seq, ctx);
        let (latency, occupancy) = if self.world == 1 {
            (0, 0)
        } else {
            let bytes = self.collective_bytes(seq);
            (self.cost.latency_ns(), self.cost.occupancy_ns(bytes))
        };
        Ok(simulate_forward(&ForwardPlan {
            variants: &variants,
            comm_free: arch.is_comm_free() || self.world == 1,
            m_attn,
            m_mlp,
            latency,
            occupancy,
            record,
        }))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct VariantReport {
    #[serde(serialize_with = "as_string")]
    pub arch: Arch,
    pub prefill_ns: u64,
    pub decode_ns: u64,
    pub tokens_per_second: f64,
    pub speedup_vs_standard: f64,
    pub collectives: usize,
    /// Sum of the modeled cost of every collective in the run.
    pub comm_cost_ns: u64,
    #[serde(skip)]
    pub prefill: ForwardTimeline,
    /// The final decode forward, if any.
    #[serde(skip)]
    pub last_decode: Option<ForwardTimeline>,
}

fn as_string<S: serde::Serializer>(arch: &Arch, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_str(arch)
}

impl VariantReport {
    pub fn total_ns(&self) -> u64 {
        self.prefill_ns + self.decode_ns
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SimReport {
    pub world: usize,
    pub batch: usize,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub variants: Vec<VariantReport>,
}

impl SimReport {
    pub fn get(&self, arch: Arch) -> Option<&VariantReport> {
        self.variants.iter().find(|v| v.arch == arch)
    }
}

fn run_arch(arch: Arch, s: &SimSetup) -> Result<VariantReport> {
    let prefill = s.forward(arch, s.prompt_len, s.prompt_len, true)?;
    let mut decode_ns = 0;
    let mut collectives = prefill.collectives;
    let mut comm_cost_ns = prefill.comm_cost;
    let mut last_decode = None;
    let n_decode = s.gen_len.saturating_sub(1);
    for j in 0..n_decode {
        let t = s.forward(arch, 1, s.prompt_len + j + 1, j + 1 == n_decode)?;
        decode_ns += t.end;
        collectives += t.collectives;
        comm_cost_ns += t.comm_cost;
        if j + 1 == n_decode {
            last_decode = Some(t);
        }
    }
    let total = prefill.end + decode_ns;
    let tokens = (s.batch * s.gen_len) as f64;
    Ok(VariantReport {
        arch,
        prefill_ns: prefill.end,
        decode_ns,
        tokens_per_second: if total == 0 { 0.0 } else { tokens * 1e9 / total as f64 },
        speedup_vs_standard: 1.0,
        collectives,
        comm_cost_ns,
        prefill,
        last_decode,
    })
}

/// Simulates every architecture in `archs` on the same setup. Speedups are
/// tokens-per-second ratios against the standard architecture, which is
/// simulated even when not requested.
pub fn simulate(archs: &[Arch], setup: &SimSetup) -> Result<SimReport> {
    setup.validate()?;
    let standard_ns = run_arch(Arch::Standard, setup)?.total_ns();
    let mut variants = Vec::with_capacity(archs.len());
    for &arch in archs {
        let mut r = run_arch(arch, setup)?;
        r.speedup_vs_standard = if arch == Arch::Standard || r.total_ns() == standard_ns {
            1.0
        } else {
            standard_ns as f64 / r.total_ns() as f64
        };
        variants.push(r);
    }
    Ok(SimReport {
        world: setup.world,
        batch: setup.batch,
        prompt_len: setup.prompt_len,
        gen_len: setup.gen_len,
        variants,
    })
}

/// Cartesian sweep axes; every other field comes from the base setup.
#[derive(Clone, Debug)]
pub struct SweepGrid {
    pub worlds: Vec<usize>,
    pub batches: Vec<usize>,
    pub costs: Vec<CostModel>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub variant: String,
    pub world: usize,
    pub batch: usize,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub prefill_ms: f64,
    pub decode_ms: f64,
    pub tok_per_s: f64,
    pub speedup_vs_standard: f64,
    /// Index into [`SweepGrid::costs`].
    #[serde(skip)]
    pub cost_index: usize,
}

impl SweepRow {
    pub fn latency_ms(&self) -> f64 {
        self.prefill_ms + self.decode_ms
    }

    pub fn tok_per_s_per_rank(&self) -> f64 {
        self.tok_per_s / self.world as f64
    }
}

pub fn rows_from_report(report: &SimReport, cost_index: usize) -> Vec<SweepRow> {
    report
        .variants
        .iter()
        .map(|v| SweepRow {
            variant: v.arch.to_string(),
            world: report.world,
            batch: report.batch,
            prompt_len: report.prompt_len,
            gen_len: report.gen_len,
            prefill_ms: v.prefill_ns as f64 / 1e6,
            decode_ms: v.decode_ns as f64 / 1e6,
            tok_per_s: v.tokens_per_second,
            speedup_vs_standard: v.speedup_vs_standard,
            cost_index,
        })
        .collect()
}

/// Runs the cartesian product cost × world × batch, one row per variant.
/// Worlds that do not divide the model's heads are rejected.
pub fn sweep(archs: &[Arch], base: &SimSetup, grid: &SweepGrid) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for (ci, cost) in grid.costs.iter().enumerate() {
        for &world in &grid.worlds {
            crate::shard::check_divisibility(&base.cfg, world)?;
            for &batch in &grid.batches {
                let setup = SimSetup {
                    world,
                    batch,
                    cost: *cost,
                    ..base.clone()
                };
                rows.extend(rows_from_report(&simulate(archs, &setup)?, ci));
            }
        }
    }
    Ok(rows)
}

pub const CSV_HEADER: &str =
    "variant,world,batch,prompt_len,gen_len,prefill_ms,decode_ms,tok_per_s,speedup_vs_standard";

pub fn to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.6},{:.6},{:.3},{:.4}",
            r.variant,
            r.world,
            r.batch,
            r.prompt_len,
            r.gen_len,
            r.prefill_ms,
            r.decode_ms,
            r.tok_per_s,
            r.speedup_vs_standard
        );
    }
    out
}

/// Indices of the points not dominated on (lower latency, higher
/// throughput), in input order. Exact duplicates all survive.
pub fn pareto_front(points: &[(f64, f64)]) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| {
            let (li, ti) = points[i];
            !points.iter().any(|&(l, t)| l <= li && t >= ti && (l < li || t > ti))
        })
        .collect()
}

/// Pareto front of the rows on latency vs throughput per rank.
pub fn pareto_rows(rows: &[SweepRow]) -> Vec<&SweepRow> {
    let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.latency_ms(), r.tok_per_s_per_rank())).collect();
    pareto_front(&points).into_iter().map(|i| &rows[i]).collect()
}

pub fn sweep_markdown(rows: &[SweepRow]) -> String {
    let mut out = String::from(
        "| Variant | World | Batch | Prefill (ms) | Decode (ms) | Tok/s | Speedup |\n|---|---:|---:|---:|---:|---:|---:|\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {:.3} | {:.3} | {:.1} | {:.2}x |",
            r.variant, r.world, r.batch, r.prefill_ms, r.decode_ms, r.tok_per_s, r.speedup_vs_standard
        );
    }
    out
}

pub fn pareto_markdown(rows: &[SweepRow]) -> String {
    let mut front = pareto_rows(rows);
    front.sort_by(|a, b| a.latency_ms().total_cmp(&b.latency_ms()));
    let mut out =
        String::from("| Variant | World | Batch | Latency (ms) | Tok/s per rank |\n|---|---:|---:|---:|---:|\n");
    for r in front {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {:.3} | {:.1} |",
            r.variant,
            r.world,
            r.batch,
            r.latency_ms(),
            r.tok_per_s_per_rank()
        );
    }
    out
}

/// Ladder speedup per model size with and without P2P.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeedupRow {
    pub model: String,
    pub p2p_disabled: f64,
    pub p2p_enabled: f64,
}

pub fn speedup_table_markdown(rows: &[SpeedupRow]) -> String {
    let mut out = String::from("| Model size | P2P disabled | P2P enabled |\n|---|---:|---:|\n");
    for r in rows {
        let _ = writeln!(out, "| {} | {:.2}x | {:.2}x |", r.model, r.p2p_disabled, r.p2p_enabled);
    }
    out
}

/// Percent improvements of `opt` over `orig`: latencies as `1 - opt/orig`,
/// throughput as `opt/orig - 1`.
pub fn improvements(orig: &VariantReport, opt: &VariantReport) -> (f64, f64, f64) {
    let lat = |o: u64, n: u64| {
        if o == 0 {
            0.0
        } else {
            (1.0 - n as f64 / o as f64) * 100.0
        }
    };
    let tps = if orig.tokens_per_second == 0.0 {
        0.0
    } else {
        (opt.tokens_per_second / orig.tokens_per_second - 1.0) * 100.0
    };
    (
        lat(orig.prefill_ns, opt.prefill_ns),
        lat(orig.decode_ns, opt.decode_ns),
        tps,
    )
}

/// Per-phase improvement table; `sections` pairs a label such as
/// `"8B (P2P=1)"` with a report that includes the standard architecture.
pub fn breakdown_markdown(sections: &[(String, &SimReport)]) -> String {
    let mut out = String::from(
        "| Model | Prefill Latency Improvement (%) | Decode Latency Improvement (%) | Token/sec Improvement (%) |\n|---|---:|---:|---:|\n",
    );
    for (label, report) in sections {
        let Some(orig) = report.get(Arch::Standard) else {
            continue;
        };
        for v in report.variants.iter().filter(|v| v.arch != Arch::Standard) {
            let (p, d, t) = improvements(orig, v);
            let _ = writeln!(out, "| {} {} | {:.2} | {:.2} | {:.2} |", v.arch, label, p, d, t);
        }
    }
    out
}
