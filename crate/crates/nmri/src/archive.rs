// SPDX-License-Identifier: MIT OR Apache-2.0

//! Model directories: `config.json`, `model.safetensors` and optionally the
//! tokenizer's `vocab.json` and `merges.txt`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use nmri_core::engine::ByteLevelBpe;
use nmri_core::{Model, ModelSpec, Tensor, WeightStore};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::config::Gpt2Config;
use crate::layout::{self, Layout};
use crate::{Error, Result};

pub const CONFIG_FILE: &str = "config.json";
pub const WEIGHTS_FILE: &str = "model.safetensors";
pub const VOCAB_FILE: &str = "vocab.json";
pub const MERGES_FILE: &str = "merges.txt";

/// Tensor naming used when writing an archive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchiveLayout {
    Canonical,
    /// Published GPT-2 names, optionally omitting a tied unembedding.
    Published { tied_unembed: bool },
}

pub fn read_tensors(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensors(&bytes)
}

pub fn decode_tensors(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Archive(e.to_string()))?;
    let mut out = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(Error::Archive(format!(
                "tensor `{name}` has dtype {:?}; only F32 archives are supported",
                view.dtype()
            )));
        }
        let data = view
            .data()
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.insert(name, Tensor::new(view.shape().to_vec(), data)?);
    }
    Ok(out)
}

pub fn encode_tensors(tensors: &BTreeMap<String, Tensor>) -> Result<Vec<u8>> {
    let bytes: Vec<(&String, &Tensor, Vec<u8>)> = tensors
        .iter()
        .map(|(n, t)| (n, t, t.data().iter().flat_map(|v| v.to_le_bytes()).collect()))
        .collect();
    let views = bytes
        .iter()
        .map(|(n, t, b)| {
            TensorView::new(Dtype::F32, t.shape().to_vec(), b)
                .map(|v| (n.as_str(), v))
                .map_err(|e| Error::Archive(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    safetensors::serialize(views, None::<HashMap<String, String>>).map_err(|e| Error::Archive(e.to_string()))
}

pub fn write_tensors(path: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let bytes = encode_tensors(tensors)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_spec(dir: &Path) -> Result<ModelSpec> {
    let path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Gpt2Config::parse(&text)?.to_spec()
}

pub fn load_tokenizer(vocab: &Path, merges: &Path) -> Result<ByteLevelBpe> {
    let vocab_text = fs::read_to_string(vocab).map_err(|e| Error::io(vocab, e))?;
    let merges_text = fs::read_to_string(merges).map_err(|e| Error::io(merges, e))?;
    let map: BTreeMap<String, u32> = serde_json::from_str(&vocab_text).map_err(|e| Error::parse("vocab.json", e))?;
    Ok(ByteLevelBpe::new(map, ByteLevelBpe::parse_merges(&merges_text)?)?)
}

/// Loads a model directory. Weights in either naming scheme are accepted;
/// the tokenizer is attached when both of its files are present.
pub fn load_model(dir: &Path) -> Result<Model> {
    let spec = read_spec(dir)?;
    let raw = read_tensors(&dir.join(WEIGHTS_FILE))?;
    let names: Vec<String> = raw.keys().cloned().collect();
    let (tensors, tied) = if layout::is_canonical(&names) {
        (raw, false)
    } else {
        let mapped = Layout::gpt2().to_canonical(raw)?;
        (mapped.tensors, mapped.tied_unembed)
    };
    let weights = WeightStore::from_tensors(&spec, tensors)?.with_tied_unembed(tied);
    let mut model = Model::new(spec, weights)?;
    let (vocab, merges) = (dir.join(VOCAB_FILE), dir.join(MERGES_FILE));
    if vocab.is_file() && merges.is_file() {
        model = model.with_tokenizer(load_tokenizer(&vocab, &merges)?);
    }
    Ok(model)
}

/// Writes `config.json` and `model.safetensors` into `dir`, creating it.
pub fn save_model(dir: &Path, spec: &ModelSpec, weights: &WeightStore, layout: ArchiveLayout) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let config = serde_json::to_string_pretty(&Gpt2Config::from_spec(spec)).map_err(|e| Error::parse("config", e))?;
    let config_path = dir.join(CONFIG_FILE);
    fs::write(&config_path, config + "\n").map_err(|e| Error::io(&config_path, e))?;
    let canonical: BTreeMap<String, Tensor> = weights.iter().map(|(n, t)| (n.clone(), t.clone())).collect();
    let tensors = match layout {
        ArchiveLayout::Canonical => canonical,
        ArchiveLayout::Published { tied_unembed } => Layout::gpt2().from_canonical(&canonical, tied_unembed)?,
    };
    write_tensors(&dir.join(WEIGHTS_FILE), &tensors)
}
