//! Deterministic latency model of each schedule: a per-forward event
//! simulator, the closed-form steady state it converges to, and sweep
//! reporting.

mod compute;
mod des;
mod report;
mod steady;

pub use compute::{ComputeModel, ModuleKind};
pub use des::{simulate_forward, ForwardPlan, ForwardTimeline, SimEvent, SimLane};
pub use report::{
    breakdown_markdown, improvements, pareto_front, pareto_markdown, pareto_rows, rows_from_report, simulate,
    speedup_table_markdown, sweep, sweep_markdown, to_csv, SimReport, SimSetup, SpeedupRow, SweepGrid, SweepRow,
    VariantReport, CSV_HEADER,
};
pub use steady::{steady_state, steady_state_split};
