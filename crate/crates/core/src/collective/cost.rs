use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a fabric measures time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimingMode {
    /// Real monotonic clock; waits actually block until the modeled completion.
    #[default]
    Wallclock,
    /// Per-rank virtual clocks advanced explicitly; completions are exact.
    Simulated,
}

/// Alpha–beta all-reduce cost: `(base_latency + per_byte · bytes) × m`, where
/// `m` is the P2P-disabled slowdown when P2P is off and 1 otherwise.
///
/// The two terms behave differently on the link. The per-byte part occupies
/// the link and is served FIFO, one collective at a time. The base latency is
/// pure propagation delay that runs concurrently with other collectives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub base_latency_us: f64,
    pub per_byte_ns: f64,
    pub p2p_enabled: bool,
    pub p2p_disabled_multiplier: f64,
    #[serde(default)]
    pub mode: TimingMode,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            base_latency_us: 15.0,
            per_byte_ns: 0.005,
            p2p_enabled: true,
            p2p_disabled_multiplier: 4.0,
            mode: TimingMode::Wallclock,
        }
    }
}

impl CostModel {
    /// No communication cost at all.
    pub fn free(mode: TimingMode) -> Self {
        Self {
            base_latency_us: 0.0,
            per_byte_ns: 0.0,
            mode,
            ..Self::default()
        }
    }

    /// Pure latency cost of `latency_us` per collective.
    pub fn latency(latency_us: f64, mode: TimingMode) -> Self {
        Self {
            base_latency_us: latency_us,
            per_byte_ns: 0.0,
            mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.base_latency_us) || !finite_nonneg(self.per_byte_ns) {
            return Err(Error::config(
                "cost model latency and per-byte cost must be finite and nonnegative",
            ));
        }
        if !(self.p2p_disabled_multiplier.is_finite() && self.p2p_disabled_multiplier >= 1.0) {
            return Err(Error::config("p2p_disabled_multiplier must be >= 1"));
        }
        Ok(())
    }

    pub fn multiplier(&self) -> f64 {
        if self.p2p_enabled {
            1.0
        } else {
            self.p2p_disabled_multiplier
        }
    }

    /// Total cost of one all-reduce of `bytes`, rounded to whole nanoseconds.
    pub fn cost_ns(&self, bytes: usize) -> u64 {
        ((self.base_latency_us * 1e3 + self.per_byte_ns * bytes as f64) * self.multiplier()).round() as u64
    }

    /// The concurrent (latency) share of [`cost_ns`](Self::cost_ns).
    pub fn latency_ns(&self) -> u64 {
        (self.base_latency_us * 1e3 * self.multiplier()).round() as u64
    }

    /// The serialized (link occupancy) share; `latency_ns + occupancy_ns == cost_ns`.
    pub fn occupancy_ns(&self, bytes: usize) -> u64 {
        self.cost_ns(bytes) - self.latency_ns()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_adds_up() {
        let c = CostModel {
            base_latency_us: 3.3,
            per_byte_ns: 0.7,
            ..CostModel::default()
        };
        for bytes in [0, 1, 17, 4096] {
            assert_eq!(c.latency_ns() + c.occupancy_ns(bytes), c.cost_ns(bytes));
        }
    }

    #[test]
    fn p2p_off_applies_multiplier() {
        let mut c = CostModel::latency(10.0, TimingMode::Simulated);
        assert_eq!(c.cost_ns(100), 10_000);
        c.p2p_enabled = false;
        assert_eq!(c.cost_ns(100), 40_000);
    }

    #[test]
    fn validation() {
        assert!(CostModel::default().validate().is_ok());
        let bad = CostModel {
            p2p_disabled_multiplier: 0.5,
            ..CostModel::default()
        };
        assert!(bad.validate().is_err());
        let bad = CostModel {
            per_byte_ns: -1.0,
            ..CostModel::default()
        };
        assert!(bad.validate().is_err());
    }
}
