//! HTTP API. Every mutating endpoint honors an `Idempotency-Key` header;
//! `POST /runs` also accepts `request_id` in its body.

use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use crowdflow_core::analytics::{render_document, render_table};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::error::ServiceError;
use crate::service::{parse_action, DeployRequest, Service, SimulateRequest};

pub const REQUEST_ID_HEADER: &str = "Idempotency-Key";
const MAX_WAIT_MS: u64 = 30_000;

type Svc = Arc<Service>;

fn reply(result: Result<(u16, Value), ServiceError>) -> Response {
    let (status, body) = match result {
        Ok(ok) => ok,
        Err(e) => (e.status(), e.body()),
    };
    let status = StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (status, Json(body)).into_response()
}

async fn blocking<F>(f: F) -> Response
where
    F: FnOnce() -> Result<(u16, Value), ServiceError> + Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => reply(r),
        Err(e) => reply(Err(ServiceError::Internal(e.to_string()))),
    }
}

fn ok<T: serde::Serialize>(status: u16, value: &T) -> Result<(u16, Value), ServiceError> {
    Ok((status, serde_json::to_value(value).expect("responses serialize")))
}

fn request_key(method: &str, path: &str, headers: &HeaderMap, body_id: Option<&str>) -> Option<String> {
    let id = headers
        .get(REQUEST_ID_HEADER)
        .and_then(|v| v.to_str().ok())
        .or(body_id)?;
    Some(format!("{method} {path} {id}"))
}

pub fn router(svc: Svc) -> Router {
    Router::new()
        .route("/health", get(|| async { Json(json!({ "ok": true })) }))
        .route("/adapters", get(adapters))
        .route("/workflows", get(list_workflows))
        .route("/workflows/{id}", put(put_workflow).get(get_workflow).delete(delete_workflow))
        .route("/workflows/{id}/validate", post(validate_workflow))
        .route("/runs", get(list_runs).post(deploy))
        .route("/runs/{id}", get(run_status))
        .route("/runs/{id}/actions", post(act))
        .route("/runs/{id}/report", get(report))
        .route("/runs/{id}/events", get(events))
        .route("/simulate", post(simulate))
        .fallback(|| async { reply(Err(ServiceError::NotFound("route".into()))) })
        .with_state(svc)
}

async fn adapters(State(svc): State<Svc>) -> Response {
    blocking(move || ok(200, &svc.adapter_names())).await
}

async fn list_workflows(State(svc): State<Svc>) -> Response {
    blocking(move || ok(200, &svc.list_workflows()?)).await
}

async fn put_workflow(State(svc): State<Svc>, Path(id): Path<String>, headers: HeaderMap, body: Bytes) -> Response {
    let key = request_key("PUT", &format!("/workflows/{id}"), &headers, None);
    blocking(move || {
        svc.idempotent(key, || {
            let text = std::str::from_utf8(&body).map_err(|_| ServiceError::BadRequest("body is not UTF-8".into()))?;
            let wf = svc.put_workflow(&id, text)?;
            let mut v = serde_json::to_value(&wf).expect("workflows serialize");
            v["valid"] = Value::Bool(wf.violations.is_empty());
            Ok((200, v))
        })
    })
    .await
}

async fn get_workflow(State(svc): State<Svc>, Path(id): Path<String>) -> Response {
    blocking(move || ok(200, &svc.get_workflow(&id)?)).await
}

async fn delete_workflow(State(svc): State<Svc>, Path(id): Path<String>, headers: HeaderMap) -> Response {
    let key = request_key("DELETE", &format!("/workflows/{id}"), &headers, None);
    blocking(move || {
        svc.idempotent(key, || {
            svc.delete_workflow(&id)?;
            Ok((200, json!({ "deleted": id })))
        })
    })
    .await
}

async fn validate_workflow(State(svc): State<Svc>, Path(id): Path<String>) -> Response {
    blocking(move || ok(200, &svc.validate_workflow(&id)?)).await
}

async fn list_runs(State(svc): State<Svc>) -> Response {
    blocking(move || ok(200, &svc.list_runs())).await
}

async fn deploy(State(svc): State<Svc>, headers: HeaderMap, body: Bytes) -> Response {
    let req: DeployRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return reply(Err(ServiceError::BadRequest(format!("malformed deploy request: {e}")))),
    };
    let key = request_key("POST", "/runs", &headers, req.request_id.as_deref());
    blocking(move || svc.idempotent(key, || ok(201, &svc.deploy(req)?))).await
}

async fn run_status(State(svc): State<Svc>, Path(id): Path<String>) -> Response {
    blocking(move || ok(200, &svc.status(&id)?)).await
}

#[derive(Deserialize)]
struct ActionBody {
    action: String,
}

async fn act(State(svc): State<Svc>, Path(id): Path<String>, headers: HeaderMap, body: Bytes) -> Response {
    let action = match serde_json::from_slice::<ActionBody>(&body) {
        Ok(b) => b.action,
        Err(e) => return reply(Err(ServiceError::BadRequest(format!("malformed action: {e}")))),
    };
    let key = request_key("POST", &format!("/runs/{id}/actions"), &headers, None);
    blocking(move || svc.idempotent(key, || ok(200, &svc.act(&id, parse_action(&action)?)?))).await
}

#[derive(Deserialize)]
struct ReportQuery {
    #[serde(default)]
    format: Option<String>,
}

async fn report(State(svc): State<Svc>, Path(id): Path<String>, Query(q): Query<ReportQuery>) -> Response {
    let table = match q.format.as_deref() {
        None | Some("doc") => false,
        Some("table") => true,
        Some(other) => return reply(Err(ServiceError::BadRequest(format!("unknown format `{other}`")))),
    };
    let r = tokio::task::spawn_blocking(move || svc.report(&id)).await;
    match r {
        Ok(Ok(report)) if table => ([(header::CONTENT_TYPE, "text/csv")], render_table(&report)).into_response(),
        Ok(Ok(report)) => ([(header::CONTENT_TYPE, "application/json")], render_document(&report)).into_response(),
        Ok(Err(e)) => reply(Err(e)),
        Err(e) => reply(Err(ServiceError::Internal(e.to_string()))),
    }
}

#[derive(Deserialize)]
struct EventsQuery {
    #[serde(default)]
    since_seq: u64,
    #[serde(default)]
    wait_ms: u64,
    #[serde(default)]
    limit: Option<usize>,
}

async fn events(State(svc): State<Svc>, Path(id): Path<String>, Query(q): Query<EventsQuery>) -> Response {
    let wait = Duration::from_millis(q.wait_ms.min(MAX_WAIT_MS));
    let limit = q.limit.unwrap_or(1000).min(10_000);
    blocking(move || ok(200, &svc.events(&id, q.since_seq, limit, wait)?)).await
}

async fn simulate(State(svc): State<Svc>, body: Bytes) -> Response {
    let req: SimulateRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return reply(Err(ServiceError::BadRequest(format!("malformed simulate request: {e}")))),
    };
    blocking(move || ok(200, &json!({ "events": svc.simulate(&req)? }))).await
}

/// Serves the API until ctrl-c or SIGTERM.
pub async fn serve(svc: Svc, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(svc))
        .with_graceful_shutdown(shutdown_signal())
        .await
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        match signal(SignalKind::terminate()) {
            Ok(mut term) => {
                tokio::select! {
                    _ = tokio::signal::ctrl_c() => {}
                    _ = term.recv() => {}
                }
            }
            Err(_) => {
                let _ = tokio::signal::ctrl_c().await;
            }
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}
