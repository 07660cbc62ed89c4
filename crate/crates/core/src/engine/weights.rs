// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::spec::{ModelSpec, NormKind, PositionalKind};
use crate::{Error, Result, Tensor};

/// SHA-256 over every tensor's name, shape and little-endian contents, in
/// name order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WeightDigest(pub [u8; 32]);

impl WeightDigest {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out)
            .map_err(|e| Error::Argument(format!("bad digest `{s}`: {e}")))?;
        Ok(Self(out))
    }
}

impl fmt::Display for WeightDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for WeightDigest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for WeightDigest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Self::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// Canonical tensor names and shapes a spec requires, in a fixed order.
///
/// Linear maps are stored `[in, out]` so activations multiply on the left;
/// head `h` owns columns `h*d_head..(h+1)*d_head` of `W_Q`/`W_K`/`W_V` and the
/// same rows of `W_O`.
pub fn canonical_shapes(spec: &ModelSpec) -> Vec<(String, Vec<usize>)> {
    let d = spec.d_model;
    let m = spec.d_mlp;
    let mut out = vec![("embed".to_string(), vec![spec.vocab_size, d])];
    if spec.positional_kind == PositionalKind::LearnedAbsolute {
        out.push(("pos_embed".to_string(), vec![spec.max_seq_len, d]));
    }
    let norm = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str| {
        out.push((format!("{prefix}.w"), vec![d]));
        if spec.norm_kind == NormKind::LayerNorm {
            out.push((format!("{prefix}.b"), vec![d]));
        }
    };
    for i in 0..spec.n_layers {
        norm(&mut out, &format!("blocks.{i}.ln1"));
        for w in ["W_Q", "W_K", "W_V", "W_O"] {
            out.push((format!("blocks.{i}.attn.{w}"), vec![d, d]));
        }
        for b in ["b_Q", "b_K", "b_V", "b_O"] {
            out.push((format!("blocks.{i}.attn.{b}"), vec![d]));
        }
        norm(&mut out, &format!("blocks.{i}.ln2"));
        out.push((format!("blocks.{i}.mlp.W_in"), vec![d, m]));
        out.push((format!("blocks.{i}.mlp.b_in"), vec![m]));
        out.push((format!("blocks.{i}.mlp.W_out"), vec![m, d]));
        out.push((format!("blocks.{i}.mlp.b_out"), vec![d]));
    }
    norm(&mut out, "ln_f");
    out.push(("unembed".to_string(), vec![d, spec.vocab_size]));
    out
}

/// Named parameter tensors, validated against a [`ModelSpec`].
#[derive(Debug, Clone)]
pub struct WeightStore {
    tensors: BTreeMap<String, Tensor>,
    tied_unembed: bool,
}

impl WeightStore {
    /// Validates names, shapes and finiteness. Tensors the spec does not use
    /// are rejected so that digests only cover the weights that run.
    pub fn from_tensors(spec: &ModelSpec, mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        spec.validate()?;
        let expected = canonical_shapes(spec);
        let mut kept = BTreeMap::new();
        for (name, shape) in &expected {
            let tensor = tensors
                .remove(name)
                .ok_or_else(|| Error::NamedTensorAbsent(name.clone()))?;
            if tensor.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    name: name.clone(),
                    expected: shape.clone(),
                    actual: tensor.shape().to_vec(),
                });
            }
            if let Some(index) = tensor.first_non_finite() {
                return Err(Error::CorruptWeights {
                    name: name.clone(),
                    index,
                });
            }
            kept.insert(name.clone(), tensor);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::InvalidSpec(format!(
                "tensor `{extra}` is not used by this architecture"
            )));
        }
        Ok(Self {
            tensors: kept,
            tied_unembed: false,
        })
    }

    /// Marks the unembedding as a copy of the transposed token embedding, as
    /// in checkpoints that tie the two. Only affects parameter accounting.
    pub fn with_tied_unembed(mut self, tied: bool) -> Self {
        self.tied_unembed = tied;
        self
    }

    pub fn tied_unembed(&self) -> bool {
        self.tied_unembed
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub(crate) fn expect(&self, name: &str) -> &Tensor {
        // Validated at construction.
        &self.tensors[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn into_tensors(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }

    pub fn digest(&self) -> WeightDigest {
        let mut hasher = Sha256::new();
        for (name, tensor) in &self.tensors {
            hasher.update((name.len() as u64).to_le_bytes());
            hasher.update(name.as_bytes());
            hasher.update((tensor.shape().len() as u64).to_le_bytes());
            for &dim in tensor.shape() {
                hasher.update((dim as u64).to_le_bytes());
            }
            let mut buf = Vec::with_capacity(4 * 4096);
            for chunk in tensor.data().chunks(4096) {
                buf.clear();
                for x in chunk {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
                hasher.update(&buf);
            }
        }
        let out = hasher.finalize();
        let mut bytes = [0u8; 32];
        bytes.copy_from_slice(&out);
        WeightDigest(bytes)
    }
}
