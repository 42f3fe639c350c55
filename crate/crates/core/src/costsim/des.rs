//! Discrete-event execution of one forward pass of a single rank.
//!
//! Ranks are symmetric, so one rank's timeline is the whole story. Two
//! resources exist: an in-order compute stream and a FIFO link. A compute
//! step starts once the stream is idle and every collective it waits on has
//! completed. A collective is enqueued on the link when its producing step
//! finishes, holds the link for its occupancy time, and becomes visible its
//! latency later. Which collectives each step waits on encodes the
//! architecture:
//!
//! * standard / parallel: everything issued so far (blocking all-reduce);
//! * ladder: only the same-kind collective of the previous layer, i.e. the
//!   one issued two modules earlier. Entering or leaving a ladder run drains
//!   everything, as does the end of the forward.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use crate::model::Variant;

/// Per-forward inputs of the event engine.
#[derive(Clone, Debug)]
pub struct ForwardPlan<'a> {
    pub variants: &'a [Variant],
    /// Drop every collective (communication-free upper bound).
    pub comm_free: bool,
    pub m_attn: u64,
    pub m_mlp: u64,
    pub latency: u64,
    pub occupancy: u64,
    /// Keep per-step events in the timeline.
    pub record: bool,
}

impl ForwardPlan<'_> {
    pub fn collective_cost(&self) -> u64 {
        self.latency + self.occupancy
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimLane {
    Compute,
    Communication,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimEvent {
    pub name: String,
    pub lane: SimLane,
    pub start: u64,
    pub end: u64,
}

#[derive(Clone, Debug, Default)]
pub struct ForwardTimeline {
    /// Time at which the residual is final (last compute done, all
    /// collectives drained).
    pub end: u64,
    pub collectives: usize,
    /// Sum of the modeled cost of every collective.
    pub comm_cost: u64,
    pub events: Vec<SimEvent>,
}

#[derive(Clone, Copy)]
enum Part {
    Attn,
    Mlp,
    Fused,
}

impl Part {
    fn suffix(self) -> &'static str {
        match self {
            Part::Attn => "attn",
            Part::Mlp => "mlp",
            Part::Fused => "fused",
        }
    }

    fn compute_name(self, layer: usize) -> String {
        format!("{}_compute L{layer}", self.suffix())
    }

    fn comm_name(self, layer: usize) -> String {
        format!("allreduce L{layer}.{}", self.suffix())
    }
}

struct Step {
    layer: usize,
    part: Part,
    duration: u64,
    waits: Vec<usize>,
    issues: Option<usize>,
}

fn build_program(plan: &ForwardPlan<'_>) -> (Vec<Step>, Vec<(usize, Part)>) {
    let mut steps = Vec::new();
    let mut comms: Vec<(usize, Part)> = Vec::new();
    // previous ladder layer's (attn, mlp) collectives, when inside a ladder run
    let mut ladder_prev: Option<(Option<usize>, Option<usize>)> = None;

    let issue = |comms: &mut Vec<(usize, Part)>, label: (usize, Part)| -> Option<usize> {
        if plan.comm_free {
            None
        } else {
            comms.push(label);
            Some(comms.len() - 1)
        }
    };

    for (l, variant) in plan.variants.iter().enumerate() {
        match variant {
            Variant::Standard => {
                ladder_prev = None;
                let all: Vec<usize> = (0..comms.len()).collect();
                let a = issue(&mut comms, (l, Part::Attn));
                steps.push(Step {
                    layer: l,
                    part: Part::Attn,
                    duration: plan.m_attn,
                    waits: all,
                    issues: a,
                });
                let all: Vec<usize> = (0..comms.len()).collect();
                let m = issue(&mut comms, (l, Part::Mlp));
                steps.push(Step {
                    layer: l,
                    part: Part::Mlp,
                    duration: plan.m_mlp,
                    waits: all,
                    issues: m,
                });
            }
            Variant::ParallelAttnMlp => {
                ladder_prev = None;
                let all: Vec<usize> = (0..comms.len()).collect();
                let c = issue(&mut comms, (l, Part::Fused));
                steps.push(Step {
                    layer: l,
                    part: Part::Fused,
                    duration: plan.m_attn + plan.m_mlp,
                    waits: all,
                    issues: c,
                });
            }
            Variant::Ladder => {
                let (wait_attn, wait_mlp) = match ladder_prev {
                    Some((a, m)) => (a.into_iter().collect(), m.into_iter().collect()),
                    // run entry: residual must be final
                    None => ((0..comms.len()).collect(), Vec::new()),
                };
                let a = issue(&mut comms, (l, Part::Attn));
                steps.push(Step {
                    layer: l,
                    part: Part::Attn,
                    duration: plan.m_attn,
                    waits: wait_attn,
                    issues: a,
                });
                let m = issue(&mut comms, (l, Part::Mlp));
                steps.push(Step {
                    layer: l,
                    part: Part::Mlp,
                    duration: plan.m_mlp,
                    waits: wait_mlp,
                    issues: m,
                });
                ladder_prev = Some((a, m));
            }
        }
    }
    (steps, comms)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Ev {
    ComputeDone(usize),
    LinkFree,
    CommDone(usize),
}

/// Runs the event loop for one forward pass.
pub fn simulate_forward(plan: &ForwardPlan<'_>) -> ForwardTimeline {
    let (steps, comm_names) = build_program(plan);
    let mut queue: BinaryHeap<Reverse<(u64, u64, Ev)>> = BinaryHeap::new();
    let mut tie = 0u64;
    let mut push = |queue: &mut BinaryHeap<Reverse<(u64, u64, Ev)>>, t: u64, ev: Ev| {
        queue.push(Reverse((t, tie, ev)));
        tie += 1;
    };

    let mut comm_done: Vec<Option<u64>> = vec![None; comm_names.len()];
    let mut comm_start: Vec<u64> = vec![0; comm_names.len()];
    let mut link_queue: VecDeque<usize> = VecDeque::new();
    let mut link_busy = false;
    let mut next_step = 0usize;
    let mut step_start = 0u64;
    let mut compute_busy = false;
    let mut events = Vec::new();
    let mut now = 0u64;

    loop {
        if !compute_busy && next_step < steps.len() && steps[next_step].waits.iter().all(|&c| comm_done[c].is_some()) {
            compute_busy = true;
            step_start = now;
            push(&mut queue, now + steps[next_step].duration, Ev::ComputeDone(next_step));
        }
        if !link_busy {
            if let Some(c) = link_queue.pop_front() {
                link_busy = true;
                comm_start[c] = now;
                push(&mut queue, now + plan.occupancy, Ev::LinkFree);
                push(&mut queue, now + plan.occupancy + plan.latency, Ev::CommDone(c));
            }
        }
        let Some(Reverse((t, _, ev))) = queue.pop() else { break };
        now = t;
        match ev {
            Ev::ComputeDone(i) => {
                compute_busy = false;
                if plan.record {
                    events.push(SimEvent {
                        name: steps[i].part.compute_name(steps[i].layer),
                        lane: SimLane::Compute,
                        start: step_start,
                        end: now,
                    });
                }
                if let Some(c) = steps[i].issues {
                    link_queue.push_back(c);
                }
                next_step += 1;
            }
            Ev::LinkFree => link_busy = false,
            Ev::CommDone(c) => {
                comm_done[c] = Some(now);
                if plan.record {
                    let (layer, part) = comm_names[c];
                    events.push(SimEvent {
                        name: part.comm_name(layer),
                        lane: SimLane::Communication,
                        start: comm_start[c],
                        end: now,
                    });
                }
            }
        }
    }
    debug_assert_eq!(next_step, steps.len(), "every compute step ran");
    ForwardTimeline {
        end: now,
        collectives: comm_names.len(),
        comm_cost: comm_names.len() as u64 * plan.collective_cost(),
        events,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(variants: &[Variant], m: u64, latency: u64, occupancy: u64) -> ForwardPlan<'_> {
        ForwardPlan {
            variants,
            comm_free: false,
            m_attn: m,
            m_mlp: m,
            latency,
            occupancy,
            record: true,
        }
    }

    // Hand-built timelines for 2 layers (4 modules), m = c = 1 on the link.
    #[test]
    fn four_module_timelines() {
        let std = [Variant::Standard; 2];
        let lad = [Variant::Ladder; 2];
        // standard: m c m c m c m c
        assert_eq!(simulate_forward(&plan(&std, 1, 0, 1)).end, 8);
        // ladder: compute 0..4 back to back, last collective done at 5
        let t = simulate_forward(&plan(&lad, 1, 0, 1));
        assert_eq!(t.end, 5);
        let starts: Vec<u64> = t
            .events
            .iter()
            .filter(|e| e.lane == SimLane::Compute)
            .map(|e| e.start)
            .collect();
        assert_eq!(starts, vec![0, 1, 2, 3]);
    }

    #[test]
    fn ladder_with_slow_link_is_link_bound() {
        let lad = [Variant::Ladder; 2];
        // occupancy 3 > m = 1: link never idles after first issue at t=1
        assert_eq!(simulate_forward(&plan(&lad, 1, 0, 3)).end, 1 + 4 * 3);
    }

    #[test]
    fn latency_pipelines_across_collectives() {
        let lad = [Variant::Ladder; 2];
        // pure latency 3: C0 0-1, C1 1-2, C2 waits D0 (4) 4-5, C3 waits D1 (5) 5-6, D3 done 9
        assert_eq!(simulate_forward(&plan(&lad, 1, 3, 0)).end, 9);
    }

    #[test]
    fn parallel_and_upper_bound() {
        let par = [Variant::ParallelAttnMlp; 3];
        let t = simulate_forward(&plan(&par, 2, 1, 1));
        assert_eq!((t.end, t.collectives), (3 * (4 + 2), 3));
        let std = [Variant::Standard; 3];
        let mut p = plan(&std, 2, 1, 1);
        p.comm_free = true;
        let t = simulate_forward(&p);
        assert_eq!((t.end, t.collectives), (12, 0));
    }

    #[test]
    fn zero_cost_collapses_variants() {
        for v in [Variant::Standard, Variant::Ladder, Variant::ParallelAttnMlp] {
            assert_eq!(simulate_forward(&plan(&[v; 4], 5, 0, 0)).end, 40);
        }
    }

    #[test]
    fn hybrid_drains_at_run_boundaries() {
        // standard, ladder, ladder, standard with m = 1, latency 2
        let v = [Variant::Standard, Variant::Ladder, Variant::Ladder, Variant::Standard];
        let t = simulate_forward(&plan(&v, 1, 2, 0));
        let ev = |name: &str| t.events.iter().find(|e| e.name == name).unwrap().clone();
        // ladder run entry waits for the standard layer's last collective
        assert_eq!(ev("attn_compute L1").start, ev("allreduce L0.mlp").end);
        // first standard layer after the run waits for both outstanding ones
        let drained = ev("allreduce L2.attn").end.max(ev("allreduce L2.mlp").end);
        assert_eq!(ev("attn_compute L3").start, drained);
    }
}
