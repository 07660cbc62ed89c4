// SPDX-License-Identifier: MIT OR Apache-2.0

//! Mapping between published checkpoint tensor names and canonical names.

use std::collections::BTreeMap;

use nmri_core::Tensor;
use serde::Deserialize;

use crate::{Error, Result};

const GPT2_LAYOUT: &str = include_str!("../data/gpt2_layout.toml");

#[derive(Debug, Clone, Deserialize)]
pub struct Layout {
    pub name: String,
    #[serde(default)]
    pub optional_prefix: String,
    pub block_prefix: String,
    #[serde(default)]
    pub ignored_block_suffixes: Vec<String>,
    pub global: BTreeMap<String, String>,
    pub block: BTreeMap<String, String>,
    #[serde(default)]
    pub block_split: BTreeMap<String, Vec<String>>,
    pub unembed: UnembedRule,
}

#[derive(Debug, Clone, Deserialize)]
pub struct UnembedRule {
    pub name: String,
    pub tied_to: String,
}

/// Canonical tensors recovered from an archive.
#[derive(Debug)]
pub struct Mapped {
    pub tensors: BTreeMap<String, Tensor>,
    pub tied_unembed: bool,
}

impl Layout {
    pub fn gpt2() -> Self {
        toml::from_str(GPT2_LAYOUT).expect("embedded layout parses")
    }

    /// Renames, splits and transposes published tensors. Names the layout
    /// does not know are an error, never silently dropped.
    pub fn to_canonical(&self, raw: BTreeMap<String, Tensor>) -> Result<Mapped> {
        let mut tensors = BTreeMap::new();
        let mut unembed = None;
        let mut tied_source = None;
        for (full, tensor) in raw {
            let name = full.strip_prefix(self.optional_prefix.as_str()).unwrap_or(&full);
            if name == self.unembed.name {
                unembed = Some(tensor.transposed()?);
                continue;
            }
            if name == self.unembed.tied_to {
                tied_source = Some(tensor.transposed()?);
            }
            if let Some(target) = self.global.get(name) {
                tensors.insert(target.clone(), tensor);
                continue;
            }
            let Some((layer, suffix)) = self.block_parts(name) else {
                return Err(Error::Layout(format!("tensor `{full}` is not part of the {} layout", self.name)));
            };
            if self.ignored_block_suffixes.iter().any(|s| s == suffix) {
                continue;
            }
            if let Some(target) = self.block.get(suffix) {
                tensors.insert(format!("blocks.{layer}.{target}"), tensor);
            } else if let Some(targets) = self.block_split.get(suffix) {
                for (target, part) in targets.iter().zip(split_last_axis(&tensor, targets.len(), &full)?) {
                    tensors.insert(format!("blocks.{layer}.{target}"), part);
                }
            } else {
                return Err(Error::Layout(format!("tensor `{full}` is not part of the {} layout", self.name)));
            }
        }
        let tied_unembed = unembed.is_none();
        let unembed = unembed
            .or(tied_source)
            .ok_or_else(|| Error::Layout(format!("neither `{}` nor `{}` present", self.unembed.name, self.unembed.tied_to)))?;
        tensors.insert("unembed".into(), unembed);
        Ok(Mapped { tensors, tied_unembed })
    }

    /// Inverse of [`Layout::to_canonical`]. A tied unembedding is omitted.
    pub fn from_canonical(&self, canonical: &BTreeMap<String, Tensor>, tied_unembed: bool) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        let prefixed = |name: &str| format!("{}{name}", self.optional_prefix);
        for (published, target) in &self.global {
            if let Some(t) = canonical.get(target) {
                out.insert(prefixed(published), t.clone());
            }
        }
        let n_layers = (0..).take_while(|i| canonical.contains_key(&format!("blocks.{i}.attn.W_Q"))).count();
        for i in 0..n_layers {
            let block = |suffix: &str| prefixed(&format!("{}{i}.{suffix}", self.block_prefix));
            for (published, target) in &self.block {
                if let Some(t) = canonical.get(&format!("blocks.{i}.{target}")) {
                    out.insert(block(published), t.clone());
                }
            }
            for (published, targets) in &self.block_split {
                let parts = targets
                    .iter()
                    .map(|t| {
                        let name = format!("blocks.{i}.{t}");
                        canonical.get(&name).ok_or(Error::Core(nmri_core::Error::NamedTensorAbsent(name)))
                    })
                    .collect::<Result<Vec<_>>>()?;
                out.insert(block(published), concat_last_axis(&parts)?);
            }
        }
        if !tied_unembed {
            let unembed = canonical
                .get("unembed")
                .ok_or_else(|| Error::Core(nmri_core::Error::NamedTensorAbsent("unembed".into())))?;
            out.insert(self.unembed.name.clone(), unembed.transposed()?);
        }
        Ok(out)
    }

    fn block_parts<'a>(&self, name: &'a str) -> Option<(usize, &'a str)> {
        let rest = name.strip_prefix(self.block_prefix.as_str())?;
        let (layer, suffix) = rest.split_once('.')?;
        Some((layer.parse().ok()?, suffix))
    }
}

/// True when the archive already uses canonical names.
pub fn is_canonical(names: &[String]) -> bool {
    names.iter().any(|n| n == "embed" || n.starts_with("blocks."))
}

fn split_last_axis(t: &Tensor, parts: usize, name: &str) -> Result<Vec<Tensor>> {
    let shape = t.shape();
    let last = *shape.last().unwrap_or(&0);
    if parts == 0 || last % parts != 0 {
        return Err(Error::Layout(format!("`{name}` with shape {shape:?} cannot be split into {parts}")));
    }
    let width = last / parts;
    let rows = t.numel() / last.max(1);
    let mut out = Vec::with_capacity(parts);
    for p in 0..parts {
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            let start = r * last + p * width;
            data.extend_from_slice(&t.data()[start..start + width]);
        }
        let mut part_shape = shape.to_vec();
        *part_shape.last_mut().expect("non-empty shape") = width;
        out.push(Tensor::new(part_shape, data)?);
    }
    Ok(out)
}

fn concat_last_axis(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::Layout("nothing to concatenate".into()))?;
    let shape = first.shape();
    let width = *shape.last().unwrap_or(&0);
    let rows = first.numel() / width.max(1);
    if parts.iter().any(|p| p.shape() != shape) {
        return Err(Error::Layout("fused parts differ in shape".into()));
    }
    let mut data = Vec::with_capacity(first.numel() * parts.len());
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(&p.data()[r * width..(r + 1) * width]);
        }
    }
    let mut fused = shape.to_vec();
    *fused.last_mut().expect("non-empty shape") = width * parts.len();
    Ok(Tensor::new(fused, data)?)
}
