use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::VOCAB_SIZE;
use crate::error::{Error, Result};

/// Attention mask used by a forward pass. `Causal` corresponds to
/// generation (`is_generate = true`), `Bidirectional` to embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Causal,
    #[default]
    Bidirectional,
}

impl AttentionMode {
    pub fn from_is_generate(is_generate: bool) -> Self {
        if is_generate {
            Self::Causal
        } else {
            Self::Bidirectional
        }
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Causal => "causal",
            Self::Bidirectional => "bidirectional",
        })
    }
}

impl FromStr for AttentionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "causal" => Ok(Self::Causal),
            "bidirectional" | "bi" => Ok(Self::Bidirectional),
            _ => Err(format!("expected causal or bidirectional, got `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    First,
    Last,
    #[default]
    Mean,
    WeightedMean,
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::First => "first",
            Self::Last => "last",
            Self::Mean => "mean",
            Self::WeightedMean => "weighted_mean",
        })
    }
}

impl FromStr for Pooling {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "first" => Ok(Self::First),
            "last" => Ok(Self::Last),
            "mean" => Ok(Self::Mean),
            "weighted_mean" => Ok(Self::WeightedMean),
            _ => Err(format!("expected first, last, mean or weighted_mean, got `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub pooling: Pooling,
    /// Attention used when producing embeddings. Likelihood scoring is
    /// always causal.
    pub embed_attention: AttentionMode,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: VOCAB_SIZE,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 64,
            pooling: Pooling::Mean,
            embed_attention: AttentionMode::Bidirectional,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{field}"), "must be positive"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                "model.n_heads",
                format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads),
            ));
        }
        if self.max_seq_len < 2 {
            return Err(Error::config("model.max_seq_len", "must be at least 2"));
        }
        if self.vocab_size < VOCAB_SIZE {
            return Err(Error::config(
                "model.vocab_size",
                format!("must cover the {VOCAB_SIZE} byte-level ids"),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Projection a LoRA adapter can attach to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    Q,
    K,
    V,
    O,
    Up,
    Down,
}

impl LoraTarget {
    pub const ATTENTION: [LoraTarget; 4] = [Self::Q, Self::K, Self::V, Self::O];
    pub const ALL: [LoraTarget; 6] = [Self::Q, Self::K, Self::V, Self::O, Self::Up, Self::Down];

    pub fn weight_name(self) -> &'static str {
        match self {
            Self::Q => "wq",
            Self::K => "wk",
            Self::V => "wv",
            Self::O => "wo",
            Self::Up => "w_up",
            Self::Down => "w_down",
        }
    }

    /// `(d_in, d_out)` of the targeted projection.
    pub fn dims(self, cfg: &ModelConfig) -> (usize, usize) {
        match self {
            Self::Up => (cfg.d_model, cfg.d_ff),
            Self::Down => (cfg.d_ff, cfg.d_model),
            _ => (cfg.d_model, cfg.d_model),
        }
    }
}

impl FromStr for LoraTarget {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "q" | "wq" => Ok(Self::Q),
            "k" | "wk" => Ok(Self::K),
            "v" | "wv" => Ok(Self::V),
            "o" | "wo" => Ok(Self::O),
            "up" | "w_up" => Ok(Self::Up),
            "down" | "w_down" => Ok(Self::Down),
            _ => Err(format!("unknown LoRA target `{s}`")),
        }
    }
}

impl fmt::Display for LoraTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Q => "q",
            Self::K => "k",
            Self::V => "v",
            Self::O => "o",
            Self::Up => "up",
            Self::Down => "down",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub r: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub targets: Vec<LoraTarget>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            r: 16,
            alpha: 32.0,
            dropout: 0.2,
            targets: LoraTarget::ATTENTION.to_vec(),
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.r as f64
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.r == 0 {
            return Err(Error::config("lora.r", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("lora.dropout", format!("must be in [0, 1), got {}", self.dropout)));
        }
        if !self.alpha.is_finite() {
            return Err(Error::config("lora.alpha", "must be finite"));
        }
        if self.targets.is_empty() {
            return Err(Error::config("lora.targets", "at least one target is required"));
        }
        for t in &self.targets {
            let (din, dout) = t.dims(model);
            if self.r > din.min(dout) {
                return Err(Error::config(
                    "lora.r",
                    format!("rank {} exceeds the smaller dimension of {} ({din}x{dout})", self.r, t.weight_name()),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn divisibility_error() {
        let cfg = ModelConfig {
            d_model: 64,
            n_heads: 3,
            ..Default::default()
        };
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "model.n_heads"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn lora_rank_bounded_by_target() {
        let model = ModelConfig {
            d_model: 8,
            n_heads: 2,
            ..Default::default()
        };
        let lora = LoraConfig::default();
        assert!(lora.validate(&model).is_err());
        let ok = LoraConfig { r: 8, ..Default::default() };
        assert!(ok.validate(&model).is_ok());
        let bad_dropout = LoraConfig { r: 4, dropout: 1.0, ..Default::default() };
        assert!(bad_dropout.validate(&model).is_err());
    }

    #[test]
    fn is_generate_maps_to_mode() {
        assert_eq!(AttentionMode::from_is_generate(true), AttentionMode::Causal);
        assert_eq!(AttentionMode::from_is_generate(false), AttentionMode::Bidirectional);
    }
}
