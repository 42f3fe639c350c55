//! In-process collective fabric with handle-based asynchronous all-reduce.

mod cost;
mod fabric;

pub use cost::{CostModel, TimingMode};
pub use fabric::{CommSpan, Fabric, Handle};
