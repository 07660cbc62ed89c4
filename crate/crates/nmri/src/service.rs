// SPDX-License-Identifier: MIT OR Apache-2.0

//! HTTP front door over [`api::execute`].

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use nmri_core::SCHEMA_VERSION;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::api::{self, ErrorDocument, Request};
use crate::registry::Registry;
use crate::session::{self, Session, SessionArchive};
use crate::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Job {
    Running,
    Done { result: Value },
    Failed { error: Value },
}

#[derive(Debug, Default)]
pub struct AppState {
    registry: Arc<Registry>,
    sessions: Mutex<BTreeMap<String, Arc<Mutex<Session>>>>,
    reports: Mutex<BTreeMap<String, Value>>,
    jobs: Mutex<BTreeMap<String, Job>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(registry: Arc<Registry>) -> Arc<Self> {
        Arc::new(Self {
            registry,
            ..Self::default()
        })
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    fn fresh_id(&self, prefix: &str) -> String {
        format!("{prefix}{}", self.next_id.fetch_add(1, Ordering::Relaxed) + 1)
    }
}

#[derive(Debug, Default, Deserialize)]
struct Options {
    session: Option<String>,
    #[serde(rename = "async", default)]
    background: bool,
}

fn status_of(e: &Error) -> StatusCode {
    match e.kind() {
        "not_found" => StatusCode::NOT_FOUND,
        "wrong_model" => StatusCode::CONFLICT,
        "io" | "archive" | "layout" | "invalid_weights" | "invalid_spec" => StatusCode::INTERNAL_SERVER_ERROR,
        _ => StatusCode::BAD_REQUEST,
    }
}

fn json_response(status: StatusCode, bytes: Vec<u8>) -> Response {
    let mut r = (status, bytes).into_response();
    r.headers_mut()
        .insert(header::CONTENT_TYPE, HeaderValue::from_static("application/json"));
    r
}

fn document<T: Serialize>(status: StatusCode, value: &T) -> Response {
    json_response(status, api::to_bytes(value))
}

fn error_response(e: &Error) -> Response {
    document(status_of(e), &ErrorDocument::from_error(e))
}

fn session_handle(state: &AppState, id: &str) -> Result<Arc<Mutex<Session>>> {
    state
        .sessions
        .lock()
        .expect("sessions lock")
        .get(id)
        .cloned()
        .ok_or_else(|| Error::NotFound(format!("session `{id}`")))
}

/// Builds a request from the path parameters and a JSON body object.
fn build_request(kind: &str, model: Option<&str>, body: &Bytes) -> Result<Request> {
    let mut value: Value = if body.iter().all(u8::is_ascii_whitespace) {
        json!({})
    } else {
        serde_json::from_slice(body).map_err(|e| Error::parse("request body", e))?
    };
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Error::parse("request body", "expected a JSON object"))?;
    obj.insert("kind".into(), kind.into());
    if let Some(m) = model {
        obj.insert("model".into(), m.into());
    }
    serde_json::from_value(value).map_err(|e| Error::parse("request body", e))
}

/// Executes off the async runtime and records into the session, if any.
async fn run(state: Arc<AppState>, request: Request, session: Option<String>) -> (StatusCode, Vec<u8>) {
    let handle = match session.as_deref().map(|id| session_handle(&state, id)).transpose() {
        Ok(h) => h,
        Err(e) => return (status_of(&e), api::to_bytes(&ErrorDocument::from_error(&e))),
    };
    let st = state.clone();
    let joined = tokio::task::spawn_blocking(move || {
        let (ok, response, err) = session::respond(&st.registry, &request);
        if let Some(h) = handle {
            let mut s = h.lock().expect("session lock");
            if let Err(e) = s.record(request, ok, response.clone()) {
                return (status_of(&e), api::to_bytes(&ErrorDocument::from_error(&e)));
            }
        }
        let status = err.as_ref().map_or(StatusCode::OK, status_of);
        (status, api::to_bytes(&response))
    })
    .await;
    joined.unwrap_or_else(|e| {
        let err = Error::Usage(format!("request task failed: {e}"));
        (StatusCode::INTERNAL_SERVER_ERROR, api::to_bytes(&ErrorDocument::from_error(&err)))
    })
}

async fn dispatch(state: Arc<AppState>, kind: &str, model: Option<&str>, opts: Options, body: Bytes) -> Response {
    match build_request(kind, model, &body) {
        Ok(request) => {
            let (status, bytes) = run(state, request, opts.session).await;
            json_response(status, bytes)
        }
        Err(e) => error_response(&e),
    }
}

async fn healthz() -> Response {
    document(
        StatusCode::OK,
        &json!({"status": "ok", "version": VERSION, "schema_version": SCHEMA_VERSION}),
    )
}

async fn list_models(State(state): State<Arc<AppState>>) -> Response {
    document(
        StatusCode::OK,
        &json!({"schema_version": SCHEMA_VERSION, "models": state.registry.ids()}),
    )
}

async fn load_model(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    let st = state.clone();
    let loaded = tokio::task::spawn_blocking(move || st.registry.get(&id).map(|m| (id, m))).await;
    match loaded {
        Ok(Ok((id, m))) => document(
            StatusCode::OK,
            &json!({"schema_version": SCHEMA_VERSION, "id": id, "digest": m.digest().to_hex(), "spec": m.spec()}),
        ),
        Ok(Err(e)) => error_response(&e),
        Err(e) => error_response(&Error::Usage(format!("load task failed: {e}"))),
    }
}

async fn scan(
    State(state): State<Arc<AppState>>,
    Path((id, modality)): Path<(String, String)>,
    Query(opts): Query<Options>,
    body: Bytes,
) -> Response {
    if !["t1", "t2", "fmri", "flair", "dti"].contains(&modality.as_str()) {
        return error_response(&Error::NotFound(format!("scan modality `{modality}`")));
    }
    dispatch(state, &modality, Some(&id), opts, body).await
}

async fn trace(State(s): State<Arc<AppState>>, Path(id): Path<String>, Query(o): Query<Options>, body: Bytes) -> Response {
    dispatch(s, "trace", Some(&id), o, body).await
}

async fn perturb(State(s): State<Arc<AppState>>, Path(id): Path<String>, Query(o): Query<Options>, body: Bytes) -> Response {
    dispatch(s, "perturb", Some(&id), o, body).await
}

async fn battery(State(s): State<Arc<AppState>>, Path(id): Path<String>, Query(o): Query<Options>, body: Bytes) -> Response {
    dispatch(s, "battery", Some(&id), o, body).await
}

async fn compare(State(s): State<Arc<AppState>>, Query(o): Query<Options>, body: Bytes) -> Response {
    dispatch(s, "compare", None, o, body).await
}

async fn sweep(State(state): State<Arc<AppState>>, Path(id): Path<String>, Query(opts): Query<Options>, body: Bytes) -> Response {
    if !opts.background {
        return dispatch(state, "sweep", Some(&id), opts, body).await;
    }
    let request = match build_request("sweep", Some(&id), &body) {
        Ok(r) => r,
        Err(e) => return error_response(&e),
    };
    if let Some(sid) = &opts.session {
        if let Err(e) = session_handle(&state, sid) {
            return error_response(&e);
        }
    }
    let job_id = state.fresh_id("j");
    state.jobs.lock().expect("jobs lock").insert(job_id.clone(), Job::Running);
    let st = state.clone();
    let jid = job_id.clone();
    tokio::spawn(async move {
        let (status, bytes) = run(st.clone(), request, opts.session).await;
        let value: Value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
        let job = if status == StatusCode::OK {
            Job::Done { result: value }
        } else {
            Job::Failed { error: value }
        };
        st.jobs.lock().expect("jobs lock").insert(jid, job);
    });
    document(
        StatusCode::ACCEPTED,
        &json!({"schema_version": SCHEMA_VERSION, "job_id": job_id, "status": "running"}),
    )
}

async fn job(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    match state.jobs.lock().expect("jobs lock").get(&id) {
        Some(job) => {
            let mut v = api::to_value(job);
            v["schema_version"] = SCHEMA_VERSION.into();
            v["job_id"] = id.into();
            document(StatusCode::OK, &v)
        }
        None => error_response(&Error::NotFound(format!("job `{id}`"))),
    }
}

async fn report(State(state): State<Arc<AppState>>, Path(id): Path<String>, Query(opts): Query<Options>, body: Bytes) -> Response {
    let request = match build_request("report", Some(&id), &body) {
        Ok(r) => r,
        Err(e) => return error_response(&e),
    };
    let (status, bytes) = run(state.clone(), request, opts.session).await;
    let mut response = json_response(status, bytes.clone());
    if status == StatusCode::OK {
        let report_id = state.fresh_id("r");
        let value: Value = serde_json::from_slice(&bytes).expect("service output parses");
        state.reports.lock().expect("reports lock").insert(report_id.clone(), value);
        response
            .headers_mut()
            .insert("x-report-id", HeaderValue::from_str(&report_id).expect("ascii id"));
        response.headers_mut().insert(
            header::LOCATION,
            HeaderValue::from_str(&format!("/reports/{report_id}")).expect("ascii path"),
        );
    }
    response
}

async fn get_report(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    match state.reports.lock().expect("reports lock").get(&id) {
        Some(v) => document(StatusCode::OK, v),
        None => error_response(&Error::NotFound(format!("report `{id}`"))),
    }
}

async fn create_session(State(state): State<Arc<AppState>>) -> Response {
    let id = state.fresh_id("s");
    state
        .sessions
        .lock()
        .expect("sessions lock")
        .insert(id.clone(), Arc::new(Mutex::new(Session::new(id.clone()))));
    document(StatusCode::CREATED, &json!({"schema_version": SCHEMA_VERSION, "session_id": id}))
}

async fn session_archive(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    match session_handle(&state, &id) {
        Ok(h) => {
            let archive = h.lock().expect("session lock").archive();
            document(StatusCode::OK, &archive)
        }
        Err(e) => error_response(&e),
    }
}

async fn replay(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let archive: SessionArchive = match serde_json::from_slice(&body) {
        Ok(a) => a,
        Err(e) => return error_response(&Error::parse("session archive", e)),
    };
    let st = state.clone();
    match tokio::task::spawn_blocking(move || session::replay(&archive, &st.registry)).await {
        Ok(Ok(verdict)) => document(StatusCode::OK, &verdict),
        Ok(Err(e)) => error_response(&e),
        Err(e) => error_response(&Error::Usage(format!("replay task failed: {e}"))),
    }
}

async fn fallback() -> Response {
    error_response(&Error::NotFound("endpoint".into()))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/models", get(list_models))
        .route("/models/{id}/load", post(load_model))
        .route("/models/{id}/scan/{modality}", post(scan))
        .route("/models/{id}/trace", post(trace))
        .route("/models/{id}/perturb", post(perturb))
        .route("/models/{id}/sweep", post(sweep))
        .route("/models/{id}/battery", post(battery))
        .route("/models/{id}/report", post(report))
        .route("/compare", post(compare))
        .route("/reports/{id}", get(get_report))
        .route("/jobs/{id}", get(job))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/archive", get(session_archive))
        .route("/sessions/replay", post(replay))
        .fallback(fallback)
        .with_state(state)
}

/// Binds and serves until interrupted.
pub async fn serve(bind: &str, registry: Arc<Registry>) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(bind)
        .await
        .map_err(|e| Error::io(format!("bind {bind}"), e))?;
    let addr = listener.local_addr().map_err(|e| Error::io(bind, e))?;
    tracing::info!(%addr, models = ?registry.ids(), "serving");
    axum::serve(listener, router(AppState::new(registry)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::io(bind, e))
}
