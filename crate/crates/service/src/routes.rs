use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use kcut_core::analysis::{convergence_table, Source};
use kcut_core::distributions::{fit_report, CutRecordSet};
use kcut_core::model_spec::parse_model_spec;
use serde::de::DeserializeOwned;
use serde::Serialize;
use tower_http::services::{ServeDir, ServeFile};

use crate::error::{ApiError, ApiResult};
use crate::session::{DrawRequest, ExtensionRequest};
use crate::store::SessionStore;

pub const MAX_KMAX: usize = 256;

const PLACEHOLDER: &str = "<!doctype html><title>k-cut audit service</title>\
<p>The audit console is not installed. Start the server with <code>--console-dir</code> \
pointing at the built console, or use the JSON API under <code>/api/v1</code>.</p>";

pub fn router(store: Arc<SessionStore>, console_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/health", get(|| async { Json(serde_json::json!({ "ok": true })) }))
        .route("/sessions", get(list_sessions).post(create_session))
        .route("/sessions/{id}", get(get_status))
        .route("/sessions/{id}/draws", post(record_draw))
        .route("/sessions/{id}/extension", post(extend))
        .route("/sessions/{id}/events", get(events))
        .route("/analysis/convergence", get(convergence))
        .route("/analysis/fit", post(fit))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not-found", "no such endpoint") })
        .with_state(store);
    let app = Router::new().nest("/api/v1", api);
    match console_dir {
        Some(dir) => {
            let index = dir.join("index.html");
            app.fallback_service(ServeDir::new(dir).fallback(ServeFile::new(index)))
        }
        None => app.fallback(|| async { Html(PLACEHOLDER) }),
    }
}

fn json_body<T: DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(e.to_string()))
}

/// Pretty-free JSON with a stable byte layout.
fn json<T: Serialize>(status: StatusCode, value: &T) -> Response {
    let bytes = serde_json::to_vec(value).expect("response serializes");
    (status, [(header::CONTENT_TYPE, "application/json")], bytes).into_response()
}

async fn list_sessions(State(store): State<Arc<SessionStore>>) -> Response {
    json(StatusCode::OK, &store.list())
}

async fn create_session(State(store): State<Arc<SessionStore>>, body: Bytes) -> ApiResult<Response> {
    let view = store.create(&body).await?;
    Ok(json(StatusCode::CREATED, &view))
}

async fn get_status(State(store): State<Arc<SessionStore>>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(json(StatusCode::OK, &store.get(&id)?.view()))
}

async fn record_draw(
    State(store): State<Arc<SessionStore>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    store.get(&id)?;
    let req: DrawRequest = json_body(&body)?;
    Ok(json(StatusCode::OK, &store.record_draw(&id, req).await?))
}

async fn extend(State(store): State<Arc<SessionStore>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    store.get(&id)?;
    let req: ExtensionRequest = json_body(&body)?;
    Ok(json(StatusCode::OK, &store.extend(&id, req).await?))
}

async fn events(State(store): State<Arc<SessionStore>>, Path(id): Path<String>) -> ApiResult<Response> {
    let text = store.events(&id)?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], text).into_response())
}

async fn convergence(
    State(store): State<Arc<SessionStore>>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    let model = q.get("model").map(String::as_str).unwrap_or("empirical");
    let spec = parse_model_spec(model)?;
    if spec.reads_file() {
        return Err(ApiError::bad_request("file models are not available over HTTP"));
    }
    let kmax: usize = match q.get("kmax") {
        None => 16,
        Some(v) => v.parse().map_err(|_| ApiError::bad_request(format!("kmax {v:?} is not an integer")))?,
    };
    if kmax == 0 || kmax > MAX_KMAX {
        return Err(ApiError::bad_request(format!("kmax must lie in 1..={MAX_KMAX}")));
    }
    let table = tokio::task::spawn_blocking(move || -> ApiResult<_> {
        let dist = spec.resolve(store.records())?;
        Ok(convergence_table(&[Source::new(spec.to_string(), dist)], kmax)?)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(json(StatusCode::OK, &table))
}

async fn fit(body: Bytes) -> ApiResult<Response> {
    let text = std::str::from_utf8(&body).map_err(|_| ApiError::bad_request("body is not UTF-8"))?.to_string();
    let report = tokio::task::spawn_blocking(move || -> ApiResult<_> {
        Ok(fit_report(&CutRecordSet::parse_csv(&text, None)?)?)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(json(StatusCode::OK, &report))
}
