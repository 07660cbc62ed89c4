// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the scan engine and every analysis built on it.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("tensor `{0}` is absent from the archive")]
    NamedTensorAbsent(String),
    #[error("tensor `{name}` has shape {actual:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("corrupt weights: tensor `{name}` holds a non-finite value at flat index {index}")]
    CorruptWeights { name: String, index: usize },
    #[error("tokenizer unavailable: the model was loaded without vocabulary/merges files")]
    TokenizerUnavailable,
    #[error("tokenizer: {0}")]
    Tokenizer(String),
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("invalid hook site `{site}`: {reason}")]
    InvalidSite { site: String, reason: String },
    #[error("unsupported site `{site}`: {reason}")]
    UnsupportedSite { site: String, reason: String },
    #[error("patch source shape mismatch at `{site}`: source {source_shape:?}, target {target_shape:?}")]
    PatchShape {
        site: String,
        source_shape: Vec<usize>,
        target_shape: Vec<usize>,
    },
    #[error("invalid perturbation: {0}")]
    InvalidPerturbation(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("degenerate trace: |p_clean - p_corrupt| = {gap:e} is below {min:e}")]
    DegenerateTrace { gap: f64, min: f64 },
    #[error("insufficient sites: {0}")]
    InsufficientSites(String),
    #[error("plan mismatch: {0}")]
    PlanMismatch(String),
    #[error("battery test `{test}`: {reason}")]
    Battery { test: String, reason: String },
    #[error("normal-range reference: {0}")]
    Reference(String),
    #[error("report bundle is empty: at least a T1 scan is required")]
    EmptyBundle,
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
