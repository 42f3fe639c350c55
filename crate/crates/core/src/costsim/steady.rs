//! Closed-form per-module steady-state times, the analytic cross-check of
//! the event engine.
//!
//! Notation: `m_a`, `m_m` are attention and MLP compute times; a collective
//! costs `a + b` where `a` is latency (overlaps other collectives) and `b` is
//! link occupancy (served FIFO).
//!
//! * standard: `(m_a + m_m)/2 + a + b`. Every module waits for its own
//!   collective, and the link is idle when it is issued.
//! * parallel: `(m_a + m_m + a + b)/2`, one fused step and one collective per layer.
//! * upper bound: `(m_a + m_m)/2`.
//! * ladder: with `s_k` the issue time of module `k`, `t_k` its link release
//!   and `d_k` its completion,
//!
//!   ```text
//!   s_k = max(s_{k-1}, d_{k-2}) + m_k
//!   t_k = max(s_k, t_{k-1}) + b
//!   d_k = t_k + a
//!   ```
//!
//!   is linear in the max-plus semiring, so the asymptotic period is the
//!   maximum cycle mean of its dependency graph folded modulo one layer
//!   (six nodes, weights per edge, advance in modules). With uniform `m` and
//!   pure occupancy this is `max(m, b)`; with pure latency `max(m, (m+a)/2)`.

use crate::error::{Error, Result};
use crate::model::Arch;

/// Per-module steady-state time with `c` charged as link occupancy.
pub fn steady_state(arch: Arch, m_attn: f64, m_mlp: f64, c: f64) -> Result<f64> {
    steady_state_split(arch, m_attn, m_mlp, 0.0, c)
}

/// Per-module steady-state time with the collective cost split into its
/// concurrent `latency` and serialized `occupancy` shares.
pub fn steady_state_split(arch: Arch, m_attn: f64, m_mlp: f64, latency: f64, occupancy: f64) -> Result<f64> {
    if [m_attn, m_mlp, latency, occupancy]
        .iter()
        .any(|v| !(v.is_finite() && *v >= 0.0))
    {
        return Err(Error::config("steady-state times must be finite and nonnegative"));
    }
    let c = latency + occupancy;
    Ok(match arch {
        Arch::Standard => (m_attn + m_mlp) / 2.0 + c,
        Arch::Parallel => (m_attn + m_mlp + c) / 2.0,
        Arch::UpperBound => (m_attn + m_mlp) / 2.0,
        Arch::Ladder => ladder_cycle_mean(m_attn, m_mlp, latency, occupancy),
        Arch::Hybrid(_) => {
            return Err(Error::config(
                "hybrid models have no single steady state; analyze each region",
            ))
        }
    })
}

// Node ids: s_A, s_M, t_A, t_M, d_A, d_M.
const S_A: usize = 0;
const S_M: usize = 1;
const T_A: usize = 2;
const T_M: usize = 3;
const D_A: usize = 4;
const D_M: usize = 5;

fn ladder_cycle_mean(m_a: f64, m_m: f64, a: f64, b: f64) -> f64 {
    // (from, to, weight, advance in modules)
    let edges: [(usize, usize, f64, u32); 10] = [
        (S_A, S_M, m_m, 1),
        (S_M, S_A, m_a, 1),
        (D_A, S_A, m_a, 2),
        (D_M, S_M, m_m, 2),
        (S_A, T_A, b, 0),
        (S_M, T_M, b, 0),
        (T_A, T_M, b, 1),
        (T_M, T_A, b, 1),
        (T_A, D_A, a, 0),
        (T_M, D_M, a, 0),
    ];
    let mut best = 0.0f64;
    // elementary cycles whose smallest node is `start`
    fn dfs(
        edges: &[(usize, usize, f64, u32)],
        start: usize,
        node: usize,
        on_path: &mut [bool; 6],
        weight: f64,
        advance: u32,
        best: &mut f64,
    ) {
        for &(from, to, w, adv) in edges {
            if from != node || to < start {
                continue;
            }
            if to == start {
                let total = advance + adv;
                if total > 0 {
                    *best = best.max((weight + w) / total as f64);
                }
            } else if !on_path[to] {
                on_path[to] = true;
                dfs(edges, start, to, on_path, weight + w, advance + adv, best);
                on_path[to] = false;
            }
        }
    }
    for start in 0..6 {
        let mut on_path = [false; 6];
        on_path[start] = true;
        dfs(&edges, start, start, &mut on_path, 0.0, 0, &mut best);
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ss(arch: Arch, m: f64, c: f64) -> f64 {
        steady_state(arch, m, m, c).unwrap()
    }

    #[test]
    fn no_communication_collapses_everything() {
        for arch in Arch::BASELINES {
            assert_eq!(ss(arch, 1.0, 0.0), 1.0);
        }
    }

    #[test]
    fn comm_only_is_comm_bound() {
        assert_eq!(ss(Arch::Ladder, 0.0, 1.0), 1.0);
        assert_eq!(ss(Arch::Standard, 0.0, 1.0), 1.0);
        assert_eq!(ss(Arch::Parallel, 0.0, 1.0), 0.5);
    }

    #[test]
    fn compute_bound_ladder_hides_comm() {
        assert_eq!(ss(Arch::Ladder, 2.0, 1.0), 2.0);
        assert_eq!(ss(Arch::Standard, 2.0, 1.0), 3.0);
    }

    #[test]
    fn ladder_is_max_of_m_and_c_for_occupancy() {
        for (m, c) in [(1.0, 1.0), (1.0, 3.0), (3.0, 1.0), (0.5, 0.25)] {
            assert_eq!(ss(Arch::Ladder, m, c), f64::max(m, c));
        }
    }

    #[test]
    fn ladder_with_pure_latency_pipelines() {
        let t = steady_state_split(Arch::Ladder, 1.0, 1.0, 3.0, 0.0).unwrap();
        assert_eq!(t, 2.0);
        let t = steady_state_split(Arch::Ladder, 1.0, 1.0, 0.5, 0.0).unwrap();
        assert_eq!(t, 1.0);
    }

    #[test]
    fn uneven_modules() {
        // compute-bound: average of the two
        assert_eq!(steady_state(Arch::Ladder, 3.0, 1.0, 0.5).unwrap(), 2.0);
        // the attention chain d_A -> s_A carries latency plus m_a over two modules
        let t = steady_state_split(Arch::Ladder, 3.0, 1.0, 2.0, 0.0).unwrap();
        assert_eq!(t, 2.5);
    }

    #[test]
    fn hybrid_and_negative_inputs_are_rejected() {
        assert!(steady_state(Arch::Hybrid(2), 1.0, 1.0, 1.0).is_err());
        assert!(steady_state(Arch::Ladder, -1.0, 1.0, 1.0).is_err());
    }
}
