//! Tensor-parallel transformer inference with ladder residual wiring.
//!
//! Ladder residual feeds each module the residual stream from two modules
//! back, so a module's all-reduce can run while the next module computes.
//! This crate provides:
//!
//! * [`tensor`]: dense `f32` kernels for a Llama-style forward pass;
//! * [`model`]: configs, weights, KV cache and single-threaded reference
//!   forwards for the standard, ladder, parallel and hybrid wirings;
//! * [`shard`]: Megatron-style column/row partitioning of layer weights;
//! * [`collective`]: an in-process all-reduce fabric with async handles and
//!   an injectable latency/bandwidth cost model;
//! * [`engine`]: the multi-rank executor and its event traces;
//! * [`costsim`]: a discrete-event simulator and closed-form steady-state
//!   analysis of each schedule;
//! * [`verify`]: the self-check suite behind `ladder verify`.

pub mod collective;
pub mod costsim;
pub mod engine;
pub mod error;
pub mod model;
pub mod rng;
pub mod shard;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
