use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positional {
    Rotary,
    Learned,
    None,
}

/// Shape and architecture switches of the toy decoder.
///
/// Layers and heads are indexed from zero everywhere in the crate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub activation: Activation,
    pub positional: Positional,
    /// Pre-sublayer layer norm (one per sublayer plus a final one).
    pub layernorm: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 8,
            n_heads: 8,
            d_model: 64,
            d_ff: 256,
            vocab_size: 512,
            max_seq_len: 64,
            activation: Activation::Gelu,
            positional: Positional::Rotary,
            layernorm: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn n_head_positions(&self) -> usize {
        self.n_layers * self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_layers == 0 {
            return fail("n_layers must be >= 1".into());
        }
        if self.n_heads == 0 {
            return fail("n_heads must be >= 1".into());
        }
        if self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.d_ff == 0 {
            return fail("d_ff must be >= 1".into());
        }
        if self.vocab_size < 4 {
            return fail(format!("vocab_size must be >= 4, got {}", self.vocab_size));
        }
        if self.max_seq_len == 0 {
            return fail("max_seq_len must be >= 1".into());
        }
        if self.positional == Positional::Rotary && self.head_dim() % 2 != 0 {
            return fail(format!("rotary positions need an even head dimension, got {}", self.head_dim()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn head_dim_must_divide() {
        let cfg = ModelConfig {
            d_model: 7,
            n_heads: 2,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn tiny_vocab_rejected() {
        let cfg = ModelConfig {
            vocab_size: 3,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
