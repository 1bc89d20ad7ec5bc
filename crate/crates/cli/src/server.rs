//! HTTP+JSON endpoints for the listening study.
//!
//! - `GET /api/trial/next?participant=ID`: the next unanswered trial, or 204
//! - `POST /api/response`: 200, 400 (malformed), 404 (unknown trial), 409 (duplicate)
//! - `GET /api/report`: current scores, or 409 before any response
//! - `GET /clips/{file}`: MIDI bytes as `audio/midi`

use std::collections::HashMap;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex};

use affectune::study::{StudyError, StudyResponse, StudyState};
use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;

pub struct AppState {
    study: Mutex<StudyState>,
    clip_root: PathBuf,
}

impl AppState {
    pub fn new(study: StudyState, clip_root: PathBuf) -> Arc<Self> {
        Arc::new(Self { study: Mutex::new(study), clip_root })
    }
}

type Shared = Arc<AppState>;

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/api/trial/next", get(next_trial))
        .route("/api/response", post(submit))
        .route("/api/report", get(report))
        .route("/clips/{file}", get(clip))
        .with_state(state)
}

async fn next_trial(State(s): State<Shared>, Query(q): Query<HashMap<String, String>>) -> Response {
    let Some(participant) = q.get("participant").filter(|p| !p.trim().is_empty()) else {
        return error(StatusCode::BAD_REQUEST, "missing participant");
    };
    let study = s.study.lock().expect("study lock");
    match study.next_trial(participant) {
        Some(view) => Json(view).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

async fn submit(State(s): State<Shared>, body: Bytes) -> Response {
    let response: StudyResponse = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed response: {e}")),
    };
    if response.participant_id.trim().is_empty() {
        return error(StatusCode::BAD_REQUEST, "missing participant_id");
    }
    let result = s.study.lock().expect("study lock").submit(response);
    match result {
        Ok(()) => Json(json!({ "status": "ok" })).into_response(),
        Err(e @ StudyError::UnknownTrial(_)) => error(StatusCode::NOT_FOUND, e.to_string()),
        Err(e @ StudyError::Duplicate { .. }) => error(StatusCode::CONFLICT, e.to_string()),
        Err(e) => {
            log::error!("response log: {e}");
            error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
        }
    }
}

async fn report(State(s): State<Shared>) -> Response {
    match s.study.lock().expect("study lock").report() {
        Ok(r) => Json(r).into_response(),
        Err(e @ StudyError::EmptyResponses) => error(StatusCode::CONFLICT, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

/// `rel` joined to `root`, provided it stays inside it.
fn contained(root: &Path, rel: &str) -> Option<PathBuf> {
    let rel = Path::new(rel);
    if !rel.components().all(|c| matches!(c, Component::Normal(_))) {
        return None;
    }
    let root = root.canonicalize().ok()?;
    let path = root.join(rel).canonicalize().ok()?;
    path.starts_with(&root).then_some(path)
}

async fn clip(State(s): State<Shared>, UrlPath(file): UrlPath<String>) -> Response {
    let rel = s.study.lock().expect("study lock").resolve_clip(&file).map(str::to_string);
    let Some(path) = rel.and_then(|r| contained(&s.clip_root, &r)) else {
        return error(StatusCode::NOT_FOUND, "no such clip");
    };
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, "audio/midi")], bytes).into_response(),
        Err(e) => {
            log::error!("{}: {e}", path.display());
            error(StatusCode::NOT_FOUND, "no such clip")
        }
    }
}

pub async fn serve(state: Shared, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    println!("serving on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
