// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use std::time::Duration;

use axum::http::StatusCode;
use common::{json, parity, parity_cases, registry_dir, Service};
use nmri::session::SessionArchive;
use nmri_core::SCHEMA_VERSION;

#[tokio::test]
async fn health_and_model_listing() {
    let reg = registry_dir();
    let svc = Service::new(reg.path());
    let (status, body) = svc.get("/healthz").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json(&body)["status"], "ok");
    let (_, body) = svc.get("/models").await;
    assert_eq!(json(&body)["models"], serde_json::json!(["gpt", "tiny", "tiny2"]));
    let (status, body) = svc.post("/models/tiny/load", "").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json(&body)["digest"].as_str().unwrap().len(), 64);
}

#[tokio::test]
async fn errors_carry_status_and_kind() {
    let reg = registry_dir();
    let svc = Service::new(reg.path());
    let (status, body) = svc.post("/models/ghost/scan/t1", "").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(json(&body)["error"]["kind"], "not_found");
    let (status, _) = svc.post("/models/tiny/scan/xray", "").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, body) = svc.post("/models/tiny/scan/fmri", r#"{"input":{"tokens":[999]}}"#).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(json(&body)["error"]["kind"], "invalid_input");
    let (status, body) = svc.post("/models/tiny/scan/fmri", r#"{"imput":{}}"#).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(json(&body)["error"]["kind"], "parse");
    let (status, _) = svc.get("/nowhere").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn repeated_requests_are_identical() {
    let reg = registry_dir();
    let svc = Service::new(reg.path());
    let body = r#"{"input":{"tokens":[5,4,3,2,1]}}"#;
    let (_, a) = svc.post("/models/tiny/scan/fmri", body).await;
    let (_, b) = svc.post("/models/tiny/scan/fmri", body).await;
    assert_eq!(String::from_utf8(a).unwrap(), String::from_utf8(b).unwrap());
}

#[tokio::test]
async fn cli_and_service_agree_on_every_subcommand() {
    let reg = registry_dir();
    let svc = Service::new(reg.path());
    for case in parity_cases() {
        let (cli, http) = parity(reg.path(), &svc, &case).await;
        assert_eq!(String::from_utf8(cli).unwrap(), String::from_utf8(http).unwrap(), "{}", case.name);
    }
}

#[tokio::test]
async fn background_sweep_job() {
    let reg = registry_dir();
    let svc = Service::new(reg.path());
    let body = r#"{"input":{"tokens":[1,2,3]},"layers":[0,1]}"#;
    let (status, accepted) = svc.post("/models/tiny/sweep?async=true", body).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let job_id = json(&accepted)["job_id"].as_str().unwrap().to_string();
    let mut job = serde_json::Value::Null;
    for _ in 0..200 {
        let (status, b) = svc.get(&format!("/jobs/{job_id}")).await;
        assert_eq!(status, StatusCode::OK);
        job = json(&b);
        if job["status"] != "running" {
            break;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    assert_eq!(job["status"], "done", "{job}");
    let (_, direct) = svc.post("/models/tiny/sweep", body).await;
    assert_eq!(job["result"], json(&direct));
    assert_eq!(job["result"]["result"]["entries"].as_array().unwrap().len(), 12);
}

#[tokio::test]
async fn reports_are_retrievable() {
    let reg = registry_dir();
    let svc = Service::new(reg.path());
    let (status, headers, body) = svc
        .call(axum::http::Method::POST, "/models/tiny/report", r#"{"input":{"tokens":[1,2,3,4]}}"#)
        .await;
    assert_eq!(status, StatusCode::OK);
    let location = headers["location"].to_str().unwrap().to_string();
    let (status, stored) = svc.get(&location).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(stored, body);
    let doc = json(&body);
    assert!(doc["result"]["text"].as_str().unwrap().contains("IMPRESSION"));
    assert_eq!(svc.get("/reports/r999").await.0, StatusCode::NOT_FOUND);
}

async fn new_session(svc: &Service) -> String {
    let (status, b) = svc.post("/sessions", "").await;
    assert_eq!(status, StatusCode::CREATED);
    json(&b)["session_id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn session_archive_replays_cleanly() {
    let reg = registry_dir();
    let svc = Service::new(reg.path());
    let sid = new_session(&svc).await;
    let calls = [
        ("/models/tiny/scan/t1", ""),
        ("/models/tiny/scan/t2", ""),
        ("/models/tiny/scan/fmri", r#"{"input":{"tokens":[1,2,3]}}"#),
        ("/models/tiny/scan/flair", r#"{"input":{"tokens":[1,2,3]}}"#),
        ("/models/tiny/scan/dti", r#"{"input":{"tokens":[1,2,3]},"seed":9}"#),
        ("/models/tiny/trace", r#"{"clean":{"tokens":[1,2,3]},"corrupt":{"tokens":[7,2,3]}}"#),
        (
            "/models/tiny/perturb",
            r#"{"input":{"tokens":[1,2,3]},"site":"blocks.0.resid_post","perturbation":{"mode":"noise"},"seed":4}"#,
        ),
        ("/models/tiny/sweep", r#"{"input":{"tokens":[1,2,3]},"layers":[1]}"#),
        ("/models/tiny/scan/fmri", r#"{"input":{"tokens":[999]}}"#),
        ("/models/tiny/report", r#"{"input":{"tokens":[1,2,3]}}"#),
    ];
    for (path, body) in calls {
        svc.post(&format!("{path}?session={sid}"), body).await;
    }
    let (status, archive) = svc.get(&format!("/sessions/{sid}/archive")).await;
    assert_eq!(status, StatusCode::OK);
    let parsed: SessionArchive = serde_json::from_slice(&archive).unwrap();
    assert_eq!(parsed.entries.len(), 10);
    assert!(!parsed.entries[8].ok);
    assert_eq!(parsed.entries[6].seeds, vec![4]);

    let (status, verdict) = svc.post("/sessions/replay", std::str::from_utf8(&archive).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    let verdict = json(&verdict);
    assert_eq!(verdict["replayed"], 10);
    assert_eq!(verdict["mismatches"], serde_json::json!([]));
    assert_eq!(verdict["verified"], true);

    // A fresh service over the same files replays it too.
    let fresh = Service::new(reg.path());
    let (_, verdict) = fresh.post("/sessions/replay", std::str::from_utf8(&archive).unwrap()).await;
    assert_eq!(json(&verdict)["verified"], true);
}

#[tokio::test]
async fn replay_refuses_a_different_model() {
    let reg = registry_dir();
    let svc = Service::new(reg.path());
    let sid = new_session(&svc).await;
    svc.post(&format!("/models/tiny/scan/t1?session={sid}"), "").await;
    let (_, archive) = svc.get(&format!("/sessions/{sid}/archive")).await;
    let mut archive: SessionArchive = serde_json::from_slice(&archive).unwrap();
    archive.models.insert("tiny".into(), "00".repeat(32));
    let (status, body) = svc.post("/sessions/replay", &serde_json::to_string(&archive).unwrap()).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(json(&body)["error"]["kind"], "wrong_model");

    archive.schema_version = SCHEMA_VERSION + 41;
    let (status, body) = svc.post("/sessions/replay", &serde_json::to_string(&archive).unwrap()).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(json(&body)["error"]["kind"], "schema_version");
}

#[tokio::test]
async fn interleaved_sessions_do_not_interact() {
    let reg = registry_dir();
    let svc = Service::new(reg.path());
    let a = new_session(&svc).await;
    let b = new_session(&svc).await;
    let fmri = r#"{"input":{"tokens":[2,7,1,8]}}"#;
    let perturb = r#"{"input":{"tokens":[2,7,1,8]},"site":"blocks.0.mlp_out","perturbation":{"mode":"zero"}}"#;
    let (_, a1) = svc.post(&format!("/models/tiny/scan/fmri?session={a}"), fmri).await;
    svc.post(&format!("/models/tiny/perturb?session={b}"), perturb).await;
    svc.post(&format!("/models/tiny2/scan/t1?session={b}"), "").await;
    let (_, a2) = svc.post(&format!("/models/tiny/scan/fmri?session={a}"), fmri).await;
    assert_eq!(a1, a2);
    let (_, arch_a) = svc.get(&format!("/sessions/{a}/archive")).await;
    let (_, arch_b) = svc.get(&format!("/sessions/{b}/archive")).await;
    let (arch_a, arch_b) = (json(&arch_a), json(&arch_b));
    assert_eq!(arch_a["entries"].as_array().unwrap().len(), 2);
    assert_eq!(arch_b["entries"].as_array().unwrap().len(), 2);
    assert_eq!(arch_a["models"].as_object().unwrap().len(), 1);
    assert_eq!(arch_b["models"].as_object().unwrap().len(), 2);
    assert_eq!(svc.get("/sessions/s404/archive").await.0, StatusCode::NOT_FOUND);
    assert_eq!(svc.post("/models/tiny/scan/t1?session=s404", "").await.0, StatusCode::NOT_FOUND);

    // The model behind the service is untouched by any of it.
    let digest = svc.state.registry().get("tiny").unwrap().digest();
    let reread = nmri::archive::load_model(&reg.path().join("tiny")).unwrap().digest();
    assert_eq!(digest, reread);
}
