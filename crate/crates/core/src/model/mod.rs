//! Model configuration, parameters, KV cache and reference forwards.

pub mod block;
mod config;
mod kv;
mod reference;
mod weights;

pub use config::{Arch, ModelConfig, Variant, PRESETS};
pub use kv::{KvCache, LayerKv};
pub use reference::{
    last_positions, reference_forward, reference_forward_hybrid, reference_forward_instrumented,
    reference_forward_ladder, reference_forward_parallel, reference_forward_standard, reference_generate,
    reference_generate_by_prefill, Generation, ModuleRecord, ReferenceModel,
};
pub use weights::{LayerWeights, Weights};

use crate::error::{Error, Result};

/// Token ids for `batch` equal-length sequences, row-major `[batch][seq_len]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq_len: usize,
    pub ids: Vec<u32>,
}

impl TokenBatch {
    pub fn new(batch: usize, ids: Vec<u32>) -> Result<Self> {
        if batch == 0 || ids.is_empty() || !ids.len().is_multiple_of(batch) {
            return Err(Error::config(format!(
                "{} token ids cannot form {batch} equal non-empty sequences",
                ids.len()
            )));
        }
        Ok(Self {
            batch,
            seq_len: ids.len() / batch,
            ids,
        })
    }

    pub fn single(ids: &[u32]) -> Result<Self> {
        Self::new(1, ids.to_vec())
    }

    pub fn from_sequences(seqs: &[Vec<u32>]) -> Result<Self> {
        let len = seqs.first().map_or(0, Vec::len);
        if seqs.iter().any(|s| s.len() != len) {
            return Err(Error::config("sequences in a batch must have equal length"));
        }
        Self::new(seqs.len(), seqs.concat())
    }

    pub fn sequences(&self) -> impl Iterator<Item = &[u32]> {
        self.ids.chunks_exact(self.seq_len)
    }
}

/// Byte-level demo tokenizer: one id per UTF-8 byte.
pub fn encode_bytes(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

pub fn decode_bytes(ids: &[u32]) -> String {
    let bytes: Vec<u8> = ids.iter().map(|&i| (i & 0xff) as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}
