use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Residual wiring of one transformer layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Attention then MLP, each consuming the fully updated residual.
    Standard,
    /// Each module consumes the residual from two modules back, so its input
    /// never waits on the previous module's all-reduce.
    Ladder,
    /// Attention and MLP share one pre-norm and are summed jointly.
    ParallelAttnMlp,
}

/// Whole-model architecture as selected on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arch {
    Standard,
    Ladder,
    Parallel,
    /// Standard schedule with every collective removed. Timing only.
    UpperBound,
    /// Last `k` layers ladder, the rest standard.
    Hybrid(usize),
}

impl Arch {
    pub const BASELINES: [Arch; 4] = [Arch::Standard, Arch::Ladder, Arch::Parallel, Arch::UpperBound];

    pub fn variants(self, n_layers: usize) -> Result<Vec<Variant>> {
        Ok(match self {
            Arch::Standard | Arch::UpperBound => vec![Variant::Standard; n_layers],
            Arch::Ladder => vec![Variant::Ladder; n_layers],
            Arch::Parallel => vec![Variant::ParallelAttnMlp; n_layers],
            Arch::Hybrid(k) => {
                if k > n_layers {
                    return Err(Error::config(format!("hybrid:{k} exceeds {n_layers} layers")));
                }
                let mut v = vec![Variant::Standard; n_layers - k];
                v.extend(std::iter::repeat_n(Variant::Ladder, k));
                v
            }
        })
    }

    pub fn is_comm_free(self) -> bool {
        matches!(self, Arch::UpperBound)
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arch::Standard => f.write_str("standard"),
            Arch::Ladder => f.write_str("ladder"),
            Arch::Parallel => f.write_str("parallel"),
            Arch::UpperBound => f.write_str("upper-bound"),
            Arch::Hybrid(k) => write!(f, "hybrid:{k}"),
        }
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Arch::Standard),
            "ladder" => Ok(Arch::Ladder),
            "parallel" => Ok(Arch::Parallel),
            "upper-bound" | "upper_bound" | "upperbound" => Ok(Arch::UpperBound),
            other => match other.strip_prefix("hybrid:") {
                Some(k) => k
                    .parse()
                    .map(Arch::Hybrid)
                    .map_err(|_| Error::config(format!("bad hybrid layer count in {other:?}"))),
                None => Err(Error::config(format!("unknown architecture {other:?}"))),
            },
        }
    }
}

/// Llama-style hyperparameters plus the per-layer residual wiring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f32,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f32,
    pub variant_per_layer: Vec<Variant>,
}

fn positive_f32(x: f32) -> bool {
    x.is_finite() && x > 0.0
}

fn default_rope_base() -> f32 {
    10_000.0
}

fn default_norm_eps() -> f32 {
    1e-5
}

/// Named shapes. `tiny` and `small` are desk-scale; the rest borrow the
/// layer/width shapes of public Llama-family checkpoints for simulation.
pub const PRESETS: [&str; 6] = ["tiny", "small", "1B", "3B", "8B", "70B"];

impl ModelConfig {
    #[allow(clippy::too_many_arguments)]
    fn shape(
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        n_kv_heads: usize,
        d_ff: usize,
        vocab_size: usize,
        rope_base: f32,
    ) -> Self {
        Self {
            n_layers,
            d_model,
            n_heads,
            n_kv_heads,
            head_dim: d_model / n_heads,
            d_ff,
            vocab_size,
            rope_base,
            norm_eps: 1e-5,
            variant_per_layer: vec![Variant::Standard; n_layers],
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "tiny" => Self::shape(2, 64, 8, 4, 192, 256, 10_000.0),
            "small" => Self::shape(8, 256, 16, 8, 768, 512, 10_000.0),
            "1B" => Self::shape(16, 2048, 32, 8, 8192, 128_256, 500_000.0),
            "3B" => Self::shape(28, 3072, 24, 8, 8192, 128_256, 500_000.0),
            "8B" => Self::shape(32, 4096, 32, 8, 14_336, 128_256, 500_000.0),
            "70B" => Self::shape(80, 8192, 64, 8, 28_672, 128_256, 500_000.0),
            other => {
                return Err(Error::config(format!(
                    "unknown preset {other:?}; expected one of {PRESETS:?}"
                )))
            }
        })
    }

    pub fn with_variants(mut self, variants: Vec<Variant>) -> Result<Self> {
        self.variant_per_layer = variants;
        self.validate()?;
        Ok(self)
    }

    pub fn with_arch(self, arch: Arch) -> Result<Self> {
        let v = arch.variants(self.n_layers)?;
        self.with_variants(v)
    }

    pub fn with_layers(mut self, n_layers: usize) -> Self {
        let fill = self.variant_per_layer.first().copied().unwrap_or(Variant::Standard);
        self.n_layers = n_layers;
        self.variant_per_layer = vec![fill; n_layers];
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("head_dim", self.head_dim),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.n_heads * self.head_dim != self.d_model {
            return Err(Error::config(format!(
                "n_heads ({}) * head_dim ({}) != d_model ({})",
                self.n_heads, self.head_dim, self.d_model
            )));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(Error::config(format!(
                "n_heads ({}) not divisible by n_kv_heads ({})",
                self.n_heads, self.n_kv_heads
            )));
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(Error::config("head_dim must be even for rotary embedding"));
        }
        if self.variant_per_layer.len() != self.n_layers {
            return Err(Error::config(format!(
                "{} variant tags for {} layers",
                self.variant_per_layer.len(),
                self.n_layers
            )));
        }
        if !positive_f32(self.norm_eps) || !positive_f32(self.rope_base) {
            return Err(Error::config("norm_eps and rope_base must be positive"));
        }
        Ok(())
    }

    pub fn n_modules(&self) -> usize {
        2 * self.n_layers
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    pub fn q_width(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn attention_scale(&self) -> f32 {
        1.0 / (self.head_dim as f32).sqrt()
    }

    pub fn all(&self, variant: Variant) -> bool {
        self.variant_per_layer.iter().all(|&v| v == variant)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in PRESETS {
            ModelConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(ModelConfig::preset("huge").is_err());
    }

    #[test]
    fn hybrid_puts_ladder_on_top() {
        let v = Arch::Hybrid(1).variants(3).unwrap();
        assert_eq!(v, vec![Variant::Standard, Variant::Standard, Variant::Ladder]);
        assert_eq!(
            Arch::Hybrid(0).variants(2).unwrap(),
            Arch::Standard.variants(2).unwrap()
        );
        assert_eq!(Arch::Hybrid(2).variants(2).unwrap(), Arch::Ladder.variants(2).unwrap());
        assert!(Arch::Hybrid(3).variants(2).is_err());
    }

    #[test]
    fn arch_parses_and_displays() {
        for s in ["standard", "ladder", "parallel", "upper-bound", "hybrid:4"] {
            assert_eq!(s.parse::<Arch>().unwrap().to_string(), s);
        }
        assert!("hybrid:x".parse::<Arch>().is_err());
        assert!("ring".parse::<Arch>().is_err());
    }

    #[test]
    fn validation_catches_geometry_errors() {
        let mut cfg = ModelConfig::preset("tiny").unwrap();
        cfg.n_kv_heads = 3;
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig::preset("tiny").unwrap();
        assert!(cfg.with_variants(vec![Variant::Ladder]).is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = ModelConfig::preset("tiny").unwrap().with_arch(Arch::Hybrid(1)).unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        assert!(json.contains("\"ladder\""));
        assert_eq!(serde_json::from_str::<ModelConfig>(&json).unwrap(), cfg);
    }
}
