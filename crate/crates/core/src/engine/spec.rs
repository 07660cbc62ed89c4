// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::format;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormKind {
    LayerNorm,
    RmsNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationKind {
    /// The tanh approximation used by GPT-2 (`gelu_new`).
    GeluTanh,
    GeluExact,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionalKind {
    LearnedAbsolute,
    None,
}

/// Architecture description of a decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub norm_kind: NormKind,
    pub norm_epsilon: f32,
    pub activation_kind: ActivationKind,
    pub positional_kind: PositionalKind,
}

impl ModelSpec {
    /// GPT-2-class defaults: layer-norm, tanh GELU, learned absolute positions.
    pub fn gpt2_like(n_layers: usize, n_heads: usize, d_model: usize, vocab_size: usize, max_seq_len: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            d_model,
            d_mlp: 4 * d_model,
            vocab_size,
            max_seq_len,
            norm_kind: NormKind::LayerNorm,
            norm_epsilon: 1e-5,
            activation_kind: ActivationKind::GeluTanh,
            positional_kind: PositionalKind::LearnedAbsolute,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(Error::InvalidSpec(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidSpec(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.norm_epsilon.is_finite() && self.norm_epsilon > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "norm_epsilon must be a positive real, got {}",
                self.norm_epsilon
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form parameter count. `tied_unembed` counts the unembedding as
    /// shared with the token embedding.
    pub fn parameter_count(&self, tied_unembed: bool) -> u64 {
        let d = self.d_model as u64;
        let m = self.d_mlp as u64;
        let v = self.vocab_size as u64;
        let norm = match self.norm_kind {
            NormKind::LayerNorm => 2 * d,
            NormKind::RmsNorm => d,
        };
        let attn = 4 * d * d + 4 * d;
        let mlp = 2 * d * m + m + d;
        let block = attn + mlp + 2 * norm;
        let pos = match self.positional_kind {
            PositionalKind::LearnedAbsolute => self.max_seq_len as u64 * d,
            PositionalKind::None => 0,
        };
        let unembed = if tied_unembed { 0 } else { d * v };
        v * d + pos + self.n_layers as u64 * block + norm + unembed
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indivisible_heads() {
        let mut spec = ModelSpec::gpt2_like(2, 3, 16, 10, 8);
        assert!(matches!(spec.validate(), Err(Error::InvalidSpec(_))));
        spec.n_heads = 4;
        spec.validate().unwrap();
    }

    #[test]
    fn rejects_zero_counts_and_bad_epsilon() {
        let mut spec = ModelSpec::gpt2_like(0, 2, 16, 10, 8);
        assert!(spec.validate().is_err());
        spec.n_layers = 1;
        spec.norm_epsilon = 0.0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn gpt2_small_parameter_count() {
        // 124,439,808 is the well-known tied-embedding count for GPT-2 small.
        let spec = ModelSpec::gpt2_like(12, 12, 768, 50257, 1024);
        assert_eq!(spec.parameter_count(true), 124_439_808);
    }
}
