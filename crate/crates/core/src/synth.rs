// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded synthetic models for testing and calibration.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::engine::{canonical_shapes, Model, ModelSpec, TokenSequence, WeightStore};
use crate::rng::Gaussian;
use crate::{Result, Tensor};

/// Standard deviations used by [`random_weights`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitScheme {
    /// Multiplies the `1/sqrt(fan_in)` std of `W_Q` and `W_K`.
    pub qk_gain: f32,
    /// Std of token and position embeddings.
    pub embed_std: f32,
    pub bias_std: f32,
    /// Std of the jitter around 1.0 on norm weights.
    pub norm_jitter: f32,
}

impl Default for InitScheme {
    fn default() -> Self {
        Self {
            qk_gain: 1.5,
            embed_std: 1.0,
            bias_std: 0.02,
            norm_jitter: 0.1,
        }
    }
}

/// Every tensor drawn from a normal distribution; linear maps scaled by
/// `1/sqrt(fan_in)`.
pub fn random_weights(spec: &ModelSpec, seed: u64, init: InitScheme) -> Result<WeightStore> {
    let mut g = Gaussian::new(seed);
    let mut tensors = BTreeMap::new();
    for (name, shape) in canonical_shapes(spec) {
        let numel: usize = shape.iter().product();
        let (mean, std) = if name.ends_with(".w") {
            (1.0, init.norm_jitter)
        } else if name == "embed" || name == "pos_embed" {
            (0.0, init.embed_std)
        } else if shape.len() == 1 {
            (0.0, init.bias_std)
        } else {
            let gain = if name.ends_with("W_Q") || name.ends_with("W_K") { init.qk_gain } else { 1.0 };
            (0.0, gain / libm::sqrtf(shape[0] as f32))
        };
        let data: Vec<f32> = (0..numel).map(|_| mean + std * g.sample() as f32).collect();
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    WeightStore::from_tensors(spec, tensors)
}

pub fn random_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    Model::new(spec.clone(), random_weights(spec, seed, InitScheme::default())?)
}

/// All tensors zero.
pub fn zero_weights(spec: &ModelSpec) -> Result<WeightStore> {
    let tensors: BTreeMap<String, Tensor> = canonical_shapes(spec)
        .into_iter()
        .map(|(name, shape)| (name, Tensor::zeros(shape)))
        .collect();
    WeightStore::from_tensors(spec, tensors)
}

pub fn random_tokens(len: usize, vocab: usize, seed: u64) -> TokenSequence {
    let mut g = Gaussian::new(seed);
    TokenSequence((0..len).map(|_| g.below(vocab as u64) as u32).collect())
}

/// Random weights in which block `first + 1` is a copy of block `first` and
/// both MLPs add the same constant vector of norm `magnitude`. The residual
/// stream after both blocks is dominated by that vector, so their
/// representations collapse onto one direction.
pub fn collapsed_pair_weights(spec: &ModelSpec, seed: u64, first: usize, magnitude: f32) -> Result<WeightStore> {
    if first + 1 >= spec.n_layers {
        return Err(crate::Error::Argument(alloc::format!(
            "block pair ({first}, {}) is outside a {}-layer model",
            first + 1,
            spec.n_layers
        )));
    }
    let mut tensors = random_weights(spec, seed, InitScheme::default())?.into_tensors();
    let src = alloc::format!("blocks.{first}.");
    let dst = alloc::format!("blocks.{}.", first + 1);
    let copies: Vec<(String, Tensor)> = tensors
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(&src).map(|rest| (alloc::format!("{dst}{rest}"), v.clone())))
        .collect();
    tensors.extend(copies);
    let mut g = Gaussian::new(seed ^ 0x5eed);
    let dir: Vec<f32> = (0..spec.d_model).map(|_| g.sample() as f32).collect();
    let norm = libm::sqrtf(dir.iter().map(|x| x * x).sum());
    let bias = Tensor::new(alloc::vec![spec.d_model], dir.iter().map(|x| x * magnitude / norm).collect())?;
    for b in [first, first + 1] {
        tensors.insert(alloc::format!("blocks.{b}.mlp.b_out"), bias.clone());
    }
    WeightStore::from_tensors(spec, tensors)
}
