// SPDX-License-Identifier: MIT OR Apache-2.0

//! Next-token distributions.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A token id with its probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenProb {
    pub id: u32,
    pub prob: f64,
}

/// Softmax over one row of logits, in `f64` with max subtraction.
pub fn next_token_distribution(logits: &[f32]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyInput("logits row".into()));
    }
    if let Some(i) = logits.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numeric(alloc::format!("logit {i} is not finite")));
    }
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut out: Vec<f64> = logits.iter().map(|&l| libm::exp(l as f64 - max)).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    Ok(out)
}

/// Highest-probability token; ties go to the lowest id.
pub fn top_prediction(probs: &[f64]) -> Result<TokenProb> {
    let mut best: Option<TokenProb> = None;
    for (i, &p) in probs.iter().enumerate() {
        if !p.is_finite() {
            return Err(Error::Numeric(alloc::format!("probability {i} is not finite")));
        }
        if best.is_none_or(|b| p > b.prob) {
            best = Some(TokenProb { id: i as u32, prob: p });
        }
    }
    best.ok_or_else(|| Error::EmptyInput("probability vector".into()))
}

/// Probability of `token` under the softmax of `logits`.
pub fn token_probability(logits: &[f32], token: u32) -> Result<f64> {
    let probs = next_token_distribution(logits)?;
    probs
        .get(token as usize)
        .copied()
        .ok_or(Error::TokenOutOfRange {
            id: token,
            vocab: probs.len(),
        })
}
