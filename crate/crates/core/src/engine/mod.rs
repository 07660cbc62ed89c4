// SPDX-License-Identifier: MIT OR Apache-2.0

//! Instrumented inference engine.

mod forward;
mod hooks;
mod spec;
mod tokenizer;
mod weights;

pub use forward::{ActivationTrace, LayerTrace, Model, RunRecord, TokenSequence};
pub use hooks::{Component, Hook, HookSite, PositionRange};
pub use spec::{ActivationKind, ModelSpec, NormKind, PositionalKind};
pub use tokenizer::{pretokenize, ByteLevelBpe};
pub use weights::{canonical_shapes, WeightDigest, WeightStore};
