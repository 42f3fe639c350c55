//! Parameter container, seeded init and the on-disk weight format.
//!
//! File layout:
//!
//! ```text
//! [0..8)        u64 little-endian: manifest length L
//! [8..8+L)      UTF-8 JSON manifest: { name: { shape, offset, length } }
//! [8+L..)       concatenated little-endian f32 blobs; offsets are relative
//!               to the start of this section, lengths are in bytes
//! ```
//!
//! The model config travels separately as its own JSON document.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::NormalRng;
use crate::tensor::Tensor;

/// One layer's parameters. Projections are stored `[in × out]` and applied
/// as `x · W`; attention columns are head-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub mlp_norm: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

impl LayerWeights {
    pub(crate) const NAMES: [&'static str; 9] = [
        "attn_norm",
        "wq",
        "wk",
        "wv",
        "wo",
        "mlp_norm",
        "w_gate",
        "w_up",
        "w_down",
    ];

    pub(crate) fn fields(&self) -> [&Tensor; 9] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.mlp_norm,
            &self.w_gate,
            &self.w_up,
            &self.w_down,
        ]
    }

    pub(crate) fn from_fields(mut f: impl FnMut(&'static str) -> Result<Tensor>) -> Result<Self> {
        Ok(Self {
            attn_norm: f("attn_norm")?,
            wq: f("wq")?,
            wk: f("wk")?,
            wv: f("wv")?,
            wo: f("wo")?,
            mlp_norm: f("mlp_norm")?,
            w_gate: f("w_gate")?,
            w_up: f("w_up")?,
            w_down: f("w_down")?,
        })
    }

    fn expected_shapes(cfg: &ModelConfig) -> [Vec<usize>; 9] {
        let (d, q, kv, ff) = (cfg.d_model, cfg.q_width(), cfg.kv_width(), cfg.d_ff);
        [
            vec![d],
            vec![d, q],
            vec![d, kv],
            vec![d, kv],
            vec![q, d],
            vec![d],
            vec![d, ff],
            vec![d, ff],
            vec![ff, d],
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub token_embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    pub lm_head: Tensor,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

impl Weights {
    /// Seeded init: embedding rows ~ N(0, 1), every projection and the head
    /// ~ N(0, 1/d_model), norm gains 1. Draw order is embedding, then per
    /// layer wq, wk, wv, wo, w_gate, w_up, w_down, then lm_head.
    pub fn init_random(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = NormalRng::new(seed);
        let std = (cfg.d_model as f64).powf(-0.5);
        let (d, q, kv, ff) = (cfg.d_model, cfg.q_width(), cfg.kv_width(), cfg.d_ff);
        let token_embedding = rng.tensor(&[cfg.vocab_size, d], 1.0);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerWeights {
                attn_norm: Tensor::ones(&[d]),
                wq: rng.tensor(&[d, q], std),
                wk: rng.tensor(&[d, kv], std),
                wv: rng.tensor(&[d, kv], std),
                wo: rng.tensor(&[q, d], std),
                mlp_norm: Tensor::ones(&[d]),
                w_gate: rng.tensor(&[d, ff], std),
                w_up: rng.tensor(&[d, ff], std),
                w_down: rng.tensor(&[ff, d], std),
            })
            .collect();
        let lm_head = rng.tensor(&[d, cfg.vocab_size], std);
        Ok(Self {
            token_embedding,
            layers,
            final_norm: Tensor::ones(&[d]),
            lm_head,
        })
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let check = |name: String, t: &Tensor, want: &[usize]| {
            if t.shape() != want {
                return Err(Error::config(format!(
                    "{name} has shape {:?}, config implies {want:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::config(format!("{name} contains non-finite values")));
            }
            Ok(())
        };
        check(
            "token_embedding".into(),
            &self.token_embedding,
            &[cfg.vocab_size, cfg.d_model],
        )?;
        if self.layers.len() != cfg.n_layers {
            return Err(Error::config(format!(
                "{} layers of weights for {} configured layers",
                self.layers.len(),
                cfg.n_layers
            )));
        }
        let shapes = LayerWeights::expected_shapes(cfg);
        for (i, layer) in self.layers.iter().enumerate() {
            for ((name, t), want) in LayerWeights::NAMES.iter().zip(layer.fields()).zip(&shapes) {
                check(format!("layers.{i}.{name}"), t, want)?;
            }
        }
        check("final_norm".into(), &self.final_norm, &[cfg.d_model])?;
        check("lm_head".into(), &self.lm_head, &[cfg.d_model, cfg.vocab_size])
    }

    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("token_embedding".to_string(), &self.token_embedding)];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in LayerWeights::NAMES.iter().zip(layer.fields()) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let named = self.named();
        let mut manifest = BTreeMap::new();
        let mut offset = 0u64;
        for (name, t) in &named {
            let length = t.size_bytes() as u64;
            manifest.insert(
                name.clone(),
                ManifestEntry {
                    shape: t.shape().to_vec(),
                    offset,
                    length,
                },
            );
            offset += length;
        }
        let header = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &named {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], cfg: &ModelConfig) -> Result<Self> {
        let parse = |offset: usize, message: String| Error::Parse {
            offset: offset as u64,
            message,
        };
        let len_bytes: [u8; 8] = bytes
            .get(..8)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| parse(bytes.len(), "truncated manifest length prefix".into()))?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let blob_start = 8usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| parse(8, format!("manifest length {header_len} runs past end of file")))?;
        let header = &bytes[8..blob_start];
        let text = std::str::from_utf8(header)
            .map_err(|e| parse(8 + e.valid_up_to(), "manifest is not valid UTF-8".into()))?;
        let manifest: BTreeMap<String, ManifestEntry> = serde_json::from_str(text)
            .map_err(|e| parse(8 + line_col_offset(text, e.line(), e.column()), e.to_string()))?;
        let blobs = &bytes[blob_start..];

        let take = |name: String| -> Result<Tensor> {
            let entry = manifest
                .get(&name)
                .ok_or_else(|| parse(8, format!("manifest has no tensor {name:?}")))?;
            let at = blob_start as u64 + entry.offset;
            let numel: usize = entry.shape.iter().product();
            if entry.length != (numel * 4) as u64 {
                return Err(Error::Parse {
                    offset: at,
                    message: format!(
                        "{name}: byte length {} does not match shape {:?}",
                        entry.length, entry.shape
                    ),
                });
            }
            let start = entry.offset as usize;
            let raw = start
                .checked_add(entry.length as usize)
                .and_then(|end| blobs.get(start..end))
                .ok_or_else(|| Error::Parse {
                    offset: at,
                    message: format!("{name}: blob extends past end of file"),
                })?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Tensor::new(entry.shape.clone(), data).map_err(|e| Error::Parse {
                offset: at,
                message: format!("{name}: {e}"),
            })
        };

        let token_embedding = take("token_embedding".into())?;
        let layers = (0..cfg.n_layers)
            .map(|i| LayerWeights::from_fields(|f| take(format!("layers.{i}.{f}"))))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = take("final_norm".into())?;
        let lm_head = take("lm_head".into())?;
        let w = Self {
            token_embedding,
            layers,
            final_norm,
            lm_head,
        };
        w.validate(cfg)?;
        Ok(w)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, cfg: &ModelConfig) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, cfg)
    }
}

fn line_col_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    line_start + column.saturating_sub(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig::preset("tiny").unwrap()
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = Weights::init_random(&tiny(), 9).unwrap();
        let b = Weights::init_random(&tiny(), 9).unwrap();
        assert!(a.lm_head.bit_eq(&b.lm_head));
        assert!(a.layers[1].w_down.bit_eq(&b.layers[1].w_down));
        let c = Weights::init_random(&tiny(), 10).unwrap();
        assert!(!a.lm_head.bit_eq(&c.lm_head));
        a.validate(&tiny()).unwrap();
    }

    #[test]
    fn bytes_round_trip_bitwise() {
        let w = Weights::init_random(&tiny(), 1).unwrap();
        let back = Weights::from_bytes(&w.to_bytes().unwrap(), &tiny()).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let w = Weights::init_random(&tiny(), 2).unwrap();
        w.save(&path).unwrap();
        assert_eq!(Weights::load(&path, &tiny()).unwrap(), w);
    }

    #[test]
    fn truncated_blob_reports_offset() {
        let bytes = Weights::init_random(&tiny(), 1).unwrap().to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 3];
        match Weights::from_bytes(cut, &tiny()) {
            Err(Error::Parse { offset, .. }) => assert!(offset > 8 && (offset as usize) < bytes.len()),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_manifest_reports_offset() {
        let mut bytes = 10u64.to_le_bytes().to_vec();
        bytes.extend_from_slice(b"{\"a\": [1,}");
        match Weights::from_bytes(&bytes, &tiny()) {
            Err(Error::Parse { offset, .. }) => assert!((8..18).contains(&offset), "{offset}"),
            other => panic!("expected parse error, got {other:?}"),
        }
        match Weights::from_bytes(&[1, 2, 3], &tiny()) {
            Err(Error::Parse { offset: 3, .. }) => {}
            other => panic!("expected parse error at 3, got {other:?}"),
        }
    }

    #[test]
    fn config_mismatch_is_rejected() {
        let w = Weights::init_random(&tiny(), 1).unwrap();
        let mut other = tiny();
        other.d_ff = 256;
        assert!(matches!(w.validate(&other), Err(Error::Config(_))));
    }
}
