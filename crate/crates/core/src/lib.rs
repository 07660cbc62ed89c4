// SPDX-License-Identifier: MIT OR Apache-2.0

//! Diagnostic imaging for decoder-only transformer language models.
//!
//! The crate is `no_std` (with `alloc`) and contains every scan as a pure
//! function of an immutable [`Model`]:
//!
//! - [`engine`]: deterministic forward pass with full activation capture and
//!   injectable hooks, weight store, byte-level BPE tokenizer.
//! - [`perturb`]: stateless interventions (noise, zero, amplify, mean
//!   ablation, activation patching) applied for a single forward pass.
//! - [`scan_struct`]: T1 topology and T2 weight statistics.
//! - [`scan_func`]: fMRI activation maps and DTI causal tracing.
//! - [`scan_flair`]: anomaly screening signals.
//! - [`clinic`]: robustness sweeps, tuning comparison, test battery,
//!   severity classification and report generation.
//!
//! File formats, the HTTP service and the command line live in the `nmri`
//! companion crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(feature = "std")]
extern crate std;

pub mod clinic;
pub mod engine;
mod error;
mod exec;
pub mod perturb;
pub mod probs;
pub mod rng;
pub mod synth;
pub mod scan_flair;
pub mod scan_func;
pub mod scan_struct;
pub mod tensor;

pub use engine::{
    ActivationTrace, Component, HookSite, Model, ModelSpec, PositionRange, RunRecord,
    TokenSequence, WeightStore,
};
pub use error::{Error, Result};
pub use tensor::Tensor;

/// Schema version stamped on every serialized result document.
pub const SCHEMA_VERSION: u32 = 1;
