// SPDX-License-Identifier: MIT OR Apache-2.0

//! Session recording and replay.

use std::collections::BTreeMap;
use std::time::{SystemTime, UNIX_EPOCH};

use nmri_core::SCHEMA_VERSION;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::api::{self, ErrorDocument, Request};
use crate::registry::Registry;
use crate::{Error, Result};

pub const ARCHIVE_SCHEMA_VERSION: u32 = 1;

/// One request and what it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub request: Request,
    /// Whether `response` is a result document or an error document.
    pub ok: bool,
    pub response: Value,
    /// Milliseconds since the Unix epoch. Informational only.
    pub timestamp_ms: u64,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionArchive {
    pub schema_version: u32,
    pub session_id: String,
    /// Digest every model was bound to when first used, by id.
    pub models: BTreeMap<String, String>,
    pub entries: Vec<LogEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mismatch {
    pub index: usize,
    pub kind: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayVerdict {
    pub schema_version: u32,
    pub session_id: String,
    pub replayed: usize,
    pub mismatches: Vec<Mismatch>,
    pub verified: bool,
}

/// An append-only request log bound to model digests.
#[derive(Debug, Clone)]
pub struct Session {
    id: String,
    models: BTreeMap<String, String>,
    log: Vec<LogEntry>,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

/// Runs a request and returns the document to log: the result or the error.
pub fn respond(registry: &Registry, request: &Request) -> (bool, Value, Option<Error>) {
    match api::execute(registry, request) {
        Ok(doc) => (true, api::to_value(&doc), None),
        Err(e) => (false, api::to_value(&ErrorDocument::from_error(&e)), Some(e)),
    }
}

impl Session {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            models: BTreeMap::new(),
            log: Vec::new(),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn len(&self) -> usize {
        self.log.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log.is_empty()
    }

    /// Appends an executed request. A result computed on a different model
    /// than the one the session is bound to is refused.
    pub fn record(&mut self, request: Request, ok: bool, response: Value) -> Result<()> {
        let used: BTreeMap<String, String> = response
            .get("models")
            .and_then(|m| serde_json::from_value(m.clone()).ok())
            .unwrap_or_default();
        for (id, digest) in &used {
            if let Some(bound) = self.models.get(id) {
                if bound != digest {
                    return Err(Error::WrongModel {
                        model: id.clone(),
                        expected: bound.clone(),
                        actual: digest.clone(),
                    });
                }
            }
        }
        self.models.extend(used);
        self.log.push(LogEntry {
            seeds: request.seeds(),
            request,
            ok,
            response,
            timestamp_ms: now_ms(),
        });
        Ok(())
    }

    /// Executes and records in one step.
    pub fn run(&mut self, registry: &Registry, request: Request) -> Result<Value> {
        let (ok, response, _) = respond(registry, &request);
        self.record(request, ok, response.clone())?;
        Ok(response)
    }

    pub fn archive(&self) -> SessionArchive {
        SessionArchive {
            schema_version: ARCHIVE_SCHEMA_VERSION,
            session_id: self.id.clone(),
            models: self.models.clone(),
            entries: self.log.clone(),
        }
    }
}

/// Re-executes every logged request and compares the serialized documents.
pub fn replay(archive: &SessionArchive, registry: &Registry) -> Result<ReplayVerdict> {
    if archive.schema_version != ARCHIVE_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            document: "session archive".into(),
            found: archive.schema_version,
            expected: ARCHIVE_SCHEMA_VERSION,
        });
    }
    for (id, expected) in &archive.models {
        let actual = registry.get(id)?.digest().to_hex();
        if &actual != expected {
            return Err(Error::WrongModel {
                model: id.clone(),
                expected: expected.clone(),
                actual,
            });
        }
    }
    let mut mismatches = Vec::new();
    for (index, entry) in archive.entries.iter().enumerate() {
        let recorded_version = entry.response.get("schema_version").and_then(Value::as_u64);
        if recorded_version != Some(SCHEMA_VERSION as u64) {
            return Err(Error::SchemaVersion {
                document: format!("logged response {index}"),
                found: recorded_version.unwrap_or(0) as u32,
                expected: SCHEMA_VERSION,
            });
        }
        let (ok, response, _) = respond(registry, &entry.request);
        if ok != entry.ok {
            mismatches.push(Mismatch {
                index,
                kind: "outcome".into(),
                detail: format!("recorded ok={}, replayed ok={ok}", entry.ok),
            });
        } else if api::to_bytes(&response) != api::to_bytes(&entry.response) {
            mismatches.push(Mismatch {
                index,
                kind: "document".into(),
                detail: format!("{} result differs from the recording", entry.request.kind()),
            });
        }
    }
    Ok(ReplayVerdict {
        schema_version: ARCHIVE_SCHEMA_VERSION,
        session_id: archive.session_id.clone(),
        replayed: archive.entries.len(),
        verified: mismatches.is_empty(),
        mismatches,
    })
}
