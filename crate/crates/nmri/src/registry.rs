// SPDX-License-Identifier: MIT OR Apache-2.0

//! Named models: one directory per id under a root, loaded on first use.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use nmri_core::Model;

use crate::archive;
use crate::{Error, Result};

/// Environment variable naming the default registry root.
pub const REGISTRY_ENV: &str = "NMRI_REGISTRY";

#[derive(Debug, Default)]
pub struct Registry {
    root: Option<PathBuf>,
    loaded: Mutex<BTreeMap<String, Arc<Model>>>,
}

impl Registry {
    pub fn open(root: impl Into<PathBuf>) -> Self {
        Self {
            root: Some(root.into()),
            loaded: Mutex::default(),
        }
    }

    /// A registry with no backing directory; models come from [`Registry::insert`].
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn insert(&self, id: impl Into<String>, model: Model) {
        self.loaded.lock().expect("registry lock").insert(id.into(), Arc::new(model));
    }

    /// Ids of every loadable model, sorted.
    pub fn ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.loaded.lock().expect("registry lock").keys().cloned().collect();
        if let Some(root) = &self.root {
            if let Ok(entries) = std::fs::read_dir(root) {
                for entry in entries.flatten() {
                    if entry.path().join(archive::CONFIG_FILE).is_file() {
                        if let Some(name) = entry.file_name().to_str() {
                            ids.push(name.to_string());
                        }
                    }
                }
            }
        }
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn get(&self, id: &str) -> Result<Arc<Model>> {
        if let Some(model) = self.loaded.lock().expect("registry lock").get(id) {
            return Ok(model.clone());
        }
        let valid = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) && id != "." && id != "..";
        let dir = match &self.root {
            Some(root) if valid => root.join(id),
            _ => return Err(Error::ModelNotFound(id.to_string())),
        };
        if !dir.join(archive::CONFIG_FILE).is_file() {
            return Err(Error::ModelNotFound(id.to_string()));
        }
        tracing::info!(model = id, dir = %dir.display(), "loading model");
        let model = Arc::new(archive::load_model(&dir)?);
        // Another thread may have loaded it meanwhile; keep the first.
        let mut loaded = self.loaded.lock().expect("registry lock");
        Ok(loaded.entry(id.to_string()).or_insert(model).clone())
    }
}
