use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::Value;
use tower_http::services::ServeDir;

use crate::error::{Result, ServiceError};
use crate::service::Service;

type Shared = Arc<Service>;

fn parse_body(body: &Bytes) -> Result<Value> {
    serde_json::from_slice(body).map_err(|e| ServiceError::invalid(format!("malformed JSON body: {e}"), vec![]))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T> + Send + 'static) -> Result<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Log { path: String::new(), detail: format!("writer task failed: {e}") })?
}

async fn create_session(State(svc): State<Shared>, body: Bytes) -> Result<impl IntoResponse> {
    let payload = parse_body(&body)?;
    let created = blocking(move || svc.create_session(&payload)).await?;
    Ok((StatusCode::CREATED, Json(created)))
}

async fn next_pair(State(svc): State<Shared>, Path(id): Path<String>) -> Result<impl IntoResponse> {
    Ok(Json(svc.next_pair(&id)?))
}

async fn submit_answer(
    State(svc): State<Shared>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<impl IntoResponse> {
    let payload = parse_body(&body)?;
    let mut bad = Vec::new();
    let pair_id = payload.get("pair_id").and_then(Value::as_str).map(str::to_string);
    if pair_id.is_none() {
        bad.push("pair_id".to_string());
    }
    let raw_score = payload.get("raw_score").and_then(Value::as_i64);
    if raw_score.is_none() {
        bad.push("raw_score".to_string());
    }
    let (Some(pair_id), Some(raw_score)) = (pair_id, raw_score) else {
        return Err(ServiceError::invalid("answer needs a string pair_id and an integer raw_score", bad));
    };
    let ack = blocking(move || svc.submit_answer(&id, &pair_id, raw_score)).await?;
    Ok(Json(ack))
}

async fn export(State(svc): State<Shared>) -> Result<impl IntoResponse> {
    let body = svc.export()?.to_jsonl()?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body))
}

/// The JSON API plus static audio from `audio_dir` under `/audio`.
pub fn router(service: Arc<Service>, audio_dir: PathBuf) -> Router {
    Router::new()
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}/next", get(next_pair))
        .route("/api/sessions/{id}/answers", post(submit_answer))
        .route("/api/export", get(export))
        .nest_service("/audio", ServeDir::new(audio_dir))
        .with_state(service)
}

/// Serves `app` on `listener` until the process exits.
pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    axum::serve(listener, app).await
}
