//! HTTP front of a [`Study`].
//!
//! | method | path | body / reply |
//! |---|---|---|
//! | POST | `/api/session` | `{rater_id, mode, seed?}` → `{session_id}` |
//! | GET | `/api/session/{id}/next` | `{trial_id, images, mode}` or `{done: true}` |
//! | GET | `/api/image/{image_id}` | image bytes |
//! | POST | `/api/session/{id}/judgment` | `{trial_id, payload}` → `{accepted: true}` |
//! | GET | `/api/session/{id}/progress` | `{judged, total}` |
//!
//! Unknown sessions answer 404, malformed bodies 400 and repeated judgments 409.

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};

use super::{Study, StudyError, StudyMode};

type Shared = Arc<Mutex<Study>>;

impl IntoResponse for StudyError {
    fn into_response(self) -> Response {
        let status = match self {
            StudyError::UnknownSession(_) => StatusCode::NOT_FOUND,
            StudyError::BadRequest(_) => StatusCode::BAD_REQUEST,
            StudyError::Duplicate(_) => StatusCode::CONFLICT,
            StudyError::Storage(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

fn parse<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, StudyError> {
    serde_json::from_slice(body).map_err(|e| StudyError::BadRequest(format!("malformed body: {e}")))
}

#[derive(Deserialize)]
struct NewSession {
    rater_id: String,
    mode: StudyMode,
    #[serde(default)]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct Judgment {
    trial_id: String,
    payload: Value,
}

fn lock(study: &Shared) -> std::sync::MutexGuard<'_, Study> {
    study.lock().unwrap_or_else(|p| p.into_inner())
}

async fn create_session(State(study): State<Shared>, body: Bytes) -> Result<Json<Value>, StudyError> {
    let req: NewSession = parse(&body)?;
    let id = lock(&study).create_session(&req.rater_id, req.mode, req.seed)?;
    Ok(Json(json!({ "session_id": id })))
}

async fn next(State(study): State<Shared>, Path(id): Path<String>) -> Result<Json<Value>, StudyError> {
    let n = lock(&study).next(&id)?;
    Ok(Json(serde_json::to_value(n).expect("serializable")))
}

async fn judgment(State(study): State<Shared>, Path(id): Path<String>, body: Bytes) -> Result<Json<Value>, StudyError> {
    // session existence is checked before the body so unknown sessions are 404
    lock(&study).progress(&id)?;
    let req: Judgment = parse(&body)?;
    lock(&study).record_judgment(&id, &req.trial_id, req.payload)?;
    Ok(Json(json!({ "accepted": true })))
}

async fn progress(State(study): State<Shared>, Path(id): Path<String>) -> Result<Json<Value>, StudyError> {
    let p = lock(&study).progress(&id)?;
    Ok(Json(serde_json::to_value(p).expect("serializable")))
}

async fn image(State(study): State<Shared>, Path(id): Path<String>) -> Response {
    let guard = lock(&study);
    match guard.images().get(&id) {
        Some((bytes, ct)) => (
            [(header::CONTENT_TYPE, ct), (header::CACHE_CONTROL, "public, max-age=31536000, immutable")],
            bytes.to_vec(),
        )
            .into_response(),
        None => (StatusCode::NOT_FOUND, Json(json!({ "error": format!("unknown image {id}") }))).into_response(),
    }
}

pub fn router(study: Study) -> Router {
    let shared: Shared = Arc::new(Mutex::new(study));
    Router::new()
        .route("/api/session", post(create_session))
        .route("/api/session/{id}/next", get(next))
        .route("/api/session/{id}/judgment", post(judgment))
        .route("/api/session/{id}/progress", get(progress))
        .route("/api/image/{id}", get(image))
        .with_state(shared)
}

/// Serves until Ctrl-C.
pub async fn serve(study: Study, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("study service listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(study))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
