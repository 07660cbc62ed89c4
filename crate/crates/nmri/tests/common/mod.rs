// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{HeaderMap, Method, Request, StatusCode};
use http_body_util::BodyExt;
use nmri::archive::{self, ArchiveLayout};
use nmri::registry::Registry;
use nmri::service::{router, AppState};
use nmri_core::engine::ModelSpec;
use nmri_core::synth::{random_weights, InitScheme};
use tempfile::TempDir;
use tower::ServiceExt;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn tiny_spec() -> ModelSpec {
    ModelSpec::gpt2_like(2, 2, 16, 64, 32)
}

/// A registry directory with two random models, `tiny` and `tiny2`, and a
/// copy of the tokenizer-carrying fixture archive as `gpt`.
pub fn registry_dir() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    for (id, seed) in [("tiny", 1), ("tiny2", 2)] {
        let w = random_weights(&tiny_spec(), seed, InitScheme::default()).unwrap();
        archive::save_model(&dir.path().join(id), &tiny_spec(), &w, ArchiveLayout::Canonical).unwrap();
    }
    let src = fixtures().join("tiny-gpt2");
    let dst = dir.path().join("gpt");
    std::fs::create_dir(&dst).unwrap();
    for entry in std::fs::read_dir(&src).unwrap() {
        let entry = entry.unwrap();
        std::fs::copy(entry.path(), dst.join(entry.file_name())).unwrap();
    }
    dir
}

pub fn nmri(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nmri"))
        .args(args)
        .env_remove("NMRI_REGISTRY")
        .env("RUST_LOG", "off")
        .output()
        .unwrap()
}

pub struct Service {
    pub app: axum::Router,
    pub state: Arc<AppState>,
}

impl Service {
    pub fn new(root: &Path) -> Self {
        let state = AppState::new(Arc::new(Registry::open(root)));
        Self {
            app: router(state.clone()),
            state,
        }
    }

    pub async fn call(&self, method: Method, uri: &str, body: &str) -> (StatusCode, HeaderMap, Vec<u8>) {
        let req = Request::builder()
            .method(method)
            .uri(uri)
            .header("content-type", "application/json")
            .body(Body::from(body.to_string()))
            .unwrap();
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let headers = resp.headers().clone();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
        (status, headers, bytes)
    }

    pub async fn post(&self, uri: &str, body: &str) -> (StatusCode, Vec<u8>) {
        let (s, _, b) = self.call(Method::POST, uri, body).await;
        (s, b)
    }

    pub async fn get(&self, uri: &str) -> (StatusCode, Vec<u8>) {
        let (s, _, b) = self.call(Method::GET, uri, "").await;
        (s, b)
    }
}

pub fn json(bytes: &[u8]) -> serde_json::Value {
    serde_json::from_slice(bytes).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(bytes)))
}

/// One CLI invocation and the service call that must produce the same
/// document.
pub struct ParityCase {
    pub name: &'static str,
    pub args: Vec<&'static str>,
    pub path: &'static str,
    pub body: &'static str,
}

pub fn parity_cases() -> Vec<ParityCase> {
    let case = |name, args: &[&'static str], path, body| ParityCase {
        name,
        args: args.to_vec(),
        path,
        body,
    };
    vec![
        case("t1", &["t1", "--model", "tiny"], "/models/tiny/scan/t1", ""),
        case("t2", &["t2", "--model", "tiny"], "/models/tiny/scan/t2", "{}"),
        case(
            "fmri",
            &["fmri", "--model", "tiny", "--tokens", "3,1,4,1,5"],
            "/models/tiny/scan/fmri",
            r#"{"input":{"tokens":[3,1,4,1,5]}}"#,
        ),
        case(
            "flair",
            &["flair", "--model", "tiny", "--tokens", "3,1,4,1,5"],
            "/models/tiny/scan/flair",
            r#"{"input":{"tokens":[3,1,4,1,5]}}"#,
        ),
        case(
            "dti",
            &["dti", "--model", "tiny", "--tokens", "3,1,4,1,5", "--seed", "7"],
            "/models/tiny/scan/dti",
            r#"{"input":{"tokens":[3,1,4,1,5]},"seed":7}"#,
        ),
        case(
            "trace",
            &["trace", "--model", "tiny", "--tokens", "3,1,4,1,5", "--corrupt-tokens", "3,9,4,1,5"],
            "/models/tiny/trace",
            r#"{"clean":{"tokens":[3,1,4,1,5]},"corrupt":{"tokens":[3,9,4,1,5]}}"#,
        ),
        case(
            "perturb",
            &[
                "perturb", "--model", "tiny", "--tokens", "3,1,4,1,5", "--site", "blocks.1.mlp_out", "--mode",
                "noise=0.5", "--seed", "3",
            ],
            "/models/tiny/perturb",
            r#"{"input":{"tokens":[3,1,4,1,5]},"site":"blocks.1.mlp_out","perturbation":{"mode":"noise","sigma":0.5},"seed":3}"#,
        ),
        case(
            "sweep",
            &["sweep", "--model", "tiny", "--tokens", "3,1,4,1,5", "--layers", "0-1", "--seed", "2"],
            "/models/tiny/sweep",
            r#"{"input":{"tokens":[3,1,4,1,5]},"layers":[0,1],"seed":2}"#,
        ),
        case(
            "compare",
            &[
                "compare", "--model", "tiny", "--variant", "tiny2", "--tokens", "3,1,4,1,5", "--corrupt-tokens",
                "3,9,4,1,5",
            ],
            "/compare",
            r#"{"base":"tiny","variant":"tiny2","input":{"tokens":[3,1,4,1,5]},"corrupt":{"tokens":[3,9,4,1,5]}}"#,
        ),
        case("battery", &["battery", "--model", "gpt"], "/models/gpt/battery", ""),
        case(
            "report",
            &["report", "--model", "gpt", "--prompt", "The capital of France is", "--corrupt-prompt", "The capital of Poland is"],
            "/models/gpt/report",
            r#"{"input":{"prompt":"The capital of France is"},"corrupt":{"prompt":"The capital of Poland is"}}"#,
        ),
    ]
}

/// Runs one parity case through both front ends; returns the two documents.
pub async fn parity(root: &Path, service: &Service, case: &ParityCase) -> (Vec<u8>, Vec<u8>) {
    let out = root.join(format!("{}.out.json", case.name));
    let mut args = vec!["--registry", root.to_str().unwrap()];
    args.extend(&case.args);
    args.extend(["--out", out.to_str().unwrap()]);
    let run = nmri(&args);
    assert!(run.status.success(), "{}: {}", case.name, String::from_utf8_lossy(&run.stderr));
    let cli = std::fs::read(&out).unwrap();
    let (status, http) = service.post(case.path, case.body).await;
    assert_eq!(status, StatusCode::OK, "{}: {}", case.name, String::from_utf8_lossy(&http));
    (cli, http)
}
