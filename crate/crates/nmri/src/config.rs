// SPDX-License-Identifier: MIT OR Apache-2.0

//! `config.json` in the published GPT-2 format.

use nmri_core::engine::{ActivationKind, ModelSpec, NormKind, PositionalKind};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gpt2Config {
    pub n_layer: usize,
    pub n_head: usize,
    pub n_embd: usize,
    /// MLP width; `null` means `4 × n_embd`.
    #[serde(default)]
    pub n_inner: Option<usize>,
    pub vocab_size: usize,
    #[serde(alias = "n_ctx")]
    pub n_positions: usize,
    #[serde(default = "default_activation")]
    pub activation_function: String,
    #[serde(default = "default_epsilon")]
    pub layer_norm_epsilon: f32,
    /// Extension keys for architectures the published format cannot express.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_kind: Option<NormKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positional_kind: Option<PositionalKind>,
}

fn default_activation() -> String {
    "gelu_new".into()
}

fn default_epsilon() -> f32 {
    1e-5
}

impl Gpt2Config {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse("config.json", e))
    }

    pub fn to_spec(&self) -> Result<ModelSpec> {
        let activation_kind = match self.activation_function.as_str() {
            "gelu_new" | "gelu_pytorch_tanh" | "gelu_fast" => ActivationKind::GeluTanh,
            "gelu" => ActivationKind::GeluExact,
            "relu" => ActivationKind::Relu,
            other => return Err(Error::parse("config.json", format!("unsupported activation_function `{other}`"))),
        };
        let spec = ModelSpec {
            n_layers: self.n_layer,
            n_heads: self.n_head,
            d_model: self.n_embd,
            d_mlp: self.n_inner.unwrap_or(4 * self.n_embd),
            vocab_size: self.vocab_size,
            max_seq_len: self.n_positions,
            norm_kind: self.norm_kind.unwrap_or(NormKind::LayerNorm),
            norm_epsilon: self.layer_norm_epsilon,
            activation_kind,
            positional_kind: self.positional_kind.unwrap_or(PositionalKind::LearnedAbsolute),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_spec(spec: &ModelSpec) -> Self {
        let activation_function = match spec.activation_kind {
            ActivationKind::GeluTanh => "gelu_new",
            ActivationKind::GeluExact => "gelu",
            ActivationKind::Relu => "relu",
        };
        Self {
            n_layer: spec.n_layers,
            n_head: spec.n_heads,
            n_embd: spec.d_model,
            n_inner: (spec.d_mlp != 4 * spec.d_model).then_some(spec.d_mlp),
            vocab_size: spec.vocab_size,
            n_positions: spec.max_seq_len,
            activation_function: activation_function.into(),
            layer_norm_epsilon: spec.norm_epsilon,
            norm_kind: (spec.norm_kind != NormKind::LayerNorm).then_some(spec.norm_kind),
            positional_kind: (spec.positional_kind != PositionalKind::LearnedAbsolute).then_some(spec.positional_kind),
        }
    }
}
