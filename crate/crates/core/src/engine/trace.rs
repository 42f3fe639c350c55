use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lane {
    Compute,
    Communication,
}

/// One timed span on one rank. Times are fabric nanoseconds: monotonic since
/// fabric creation in wallclock mode, virtual in simulated mode.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub rank: usize,
    pub name: String,
    pub lane: Lane,
    pub start_ns: u64,
    pub end_ns: u64,
}

impl TraceEvent {
    pub fn duration_ns(&self) -> u64 {
        self.end_ns - self.start_ns
    }

    /// Strict overlap: touching endpoints do not count.
    pub fn overlaps(&self, other: &TraceEvent) -> bool {
        self.start_ns < other.end_ns && other.start_ns < self.end_ns
    }

    pub fn is_collective(&self) -> bool {
        self.lane == Lane::Communication
    }
}

/// Append-only sink shared by all ranks.
#[derive(Debug, Default)]
pub struct TraceSink {
    events: Mutex<Vec<TraceEvent>>,
}

impl TraceSink {
    pub fn push(&self, event: TraceEvent) {
        self.events.lock().unwrap_or_else(|e| e.into_inner()).push(event);
    }

    pub fn extend(&self, events: impl IntoIterator<Item = TraceEvent>) {
        self.events.lock().unwrap_or_else(|e| e.into_inner()).extend(events);
    }

    /// All events ordered by rank, then start time, compute before
    /// communication on ties.
    pub fn into_sorted(self) -> Vec<TraceEvent> {
        let mut events = self.events.into_inner().unwrap_or_else(|e| e.into_inner());
        sort_events(&mut events);
        events
    }
}

pub fn sort_events(events: &mut [TraceEvent]) {
    events.sort_by(|a, b| {
        (a.rank, a.start_ns, a.lane == Lane::Communication, a.end_ns).cmp(&(
            b.rank,
            b.start_ns,
            b.lane == Lane::Communication,
            b.end_ns,
        ))
    });
}

/// One JSON object per line: `{rank, name, lane, start_ns, end_ns}`.
pub fn to_ndjson(events: &[TraceEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("trace events serialize"));
        out.push('\n');
    }
    out
}

pub fn from_ndjson(text: &str) -> Result<Vec<TraceEvent>> {
    let mut offset = 0u64;
    let mut events = Vec::new();
    for line in text.split_inclusive('\n') {
        let body = line.trim();
        if !body.is_empty() {
            let e: TraceEvent = serde_json::from_str(body).map_err(|err| Error::Parse {
                offset,
                message: err.to_string(),
            })?;
            if e.end_ns < e.start_ns {
                return Err(Error::Parse {
                    offset,
                    message: format!("event {:?} ends before it starts", e.name),
                });
            }
            events.push(e);
        }
        offset += line.len() as u64;
    }
    Ok(events)
}

/// Chrome trace-event JSON: each rank is a process, with compute on thread 0
/// and communication on thread 1. Timestamps are microseconds.
pub fn to_chrome_trace(events: &[TraceEvent]) -> Value {
    let mut ranks: Vec<usize> = events.iter().map(|e| e.rank).collect();
    ranks.sort_unstable();
    ranks.dedup();
    let mut out = Vec::with_capacity(events.len() + 3 * ranks.len());
    for &r in &ranks {
        out.push(json!({"ph": "M", "name": "process_name", "pid": r, "args": {"name": format!("rank {r}")}}));
        out.push(json!({"ph": "M", "name": "thread_name", "pid": r, "tid": 0, "args": {"name": "compute"}}));
        out.push(json!({"ph": "M", "name": "thread_name", "pid": r, "tid": 1, "args": {"name": "communication"}}));
    }
    for e in events {
        let tid = match e.lane {
            Lane::Compute => 0,
            Lane::Communication => 1,
        };
        out.push(json!({
            "name": e.name,
            "cat": e.lane,
            "ph": "X",
            "ts": e.start_ns as f64 / 1e3,
            "dur": e.duration_ns() as f64 / 1e3,
            "pid": e.rank,
            "tid": tid,
        }));
    }
    json!({ "traceEvents": out, "displayTimeUnit": "ns" })
}

fn lane_of(events: &[TraceEvent], rank: usize, lane: Lane) -> impl Iterator<Item = &TraceEvent> {
    events.iter().filter(move |e| e.rank == rank && e.lane == lane)
}

/// Communication events on `rank` that overlap at least one compute event
/// on the same rank.
pub fn overlapping_collectives(events: &[TraceEvent], rank: usize) -> usize {
    lane_of(events, rank, Lane::Communication)
        .filter(|c| lane_of(events, rank, Lane::Compute).any(|m| m.overlaps(c)))
        .count()
}

/// Whether the compute events of every rank are pairwise non-overlapping.
pub fn compute_lane_is_serial(events: &[TraceEvent]) -> bool {
    let mut compute: Vec<&TraceEvent> = events.iter().filter(|e| e.lane == Lane::Compute).collect();
    compute.sort_by_key(|e| (e.rank, e.start_ns, e.end_ns));
    compute
        .windows(2)
        .all(|w| w[0].rank != w[1].rank || w[0].end_ns <= w[1].start_ns)
}

fn union(mut spans: Vec<(u64, u64)>) -> Vec<(u64, u64)> {
    spans.retain(|s| s.1 > s.0);
    spans.sort_unstable();
    let mut out: Vec<(u64, u64)> = Vec::with_capacity(spans.len());
    for (s, e) in spans {
        match out.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => out.push((s, e)),
        }
    }
    out
}

/// Time on `rank` during which communication is in flight but no compute
/// runs, within the window `[from, to)`.
pub fn exposed_comm_ns(events: &[TraceEvent], rank: usize, from: u64, to: u64) -> u64 {
    let clip = |e: &TraceEvent| (e.start_ns.max(from), e.end_ns.min(to));
    let comm = union(lane_of(events, rank, Lane::Communication).map(clip).collect());
    let compute = union(lane_of(events, rank, Lane::Compute).map(clip).collect());
    let mut exposed = 0;
    for (s, e) in comm {
        let covered: u64 = compute
            .iter()
            .map(|&(cs, ce)| ce.min(e).saturating_sub(cs.max(s)))
            .sum();
        exposed += (e - s) - covered;
    }
    exposed
}

/// Number of collectives on `rank` whose name refers to layer `layer`.
pub fn collectives_in_layer(events: &[TraceEvent], rank: usize, layer: usize) -> usize {
    let prefix = format!("allreduce L{layer}.");
    lane_of(events, rank, Lane::Communication)
        .filter(|e| e.name.starts_with(&prefix))
        .count()
}
