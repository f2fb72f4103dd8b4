//! JSON API and server-sent event stream.

use std::collections::VecDeque;
use std::convert::Infallible;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use serde::Deserialize;
use serde_json::json;
use tokio::sync::watch;

use super::{AnalysisRequest, AnalysisResult, AnalysisService, CreateError, JobEvent, JobState, StoreError};

pub fn router(service: Arc<AnalysisService>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/api/analyses", post(create))
        .route("/api/analyses/{id}", get(status))
        .route("/api/analyses/{id}/events", get(events))
        .route("/api/analyses/{id}/results", get(results))
        .route("/api/analyses/{id}/search-history", get(search_history))
        .route("/api/analyses/{id}/toxicity", get(toxicity))
        .with_state(service)
}

/// Binds and serves until the listener fails.
pub async fn serve(service: Arc<AnalysisService>, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(service)).await
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn not_found(id: &str) -> Response {
    error(StatusCode::NOT_FOUND, format!("analysis {id} not found"))
}

fn internal(e: StoreError) -> Response {
    error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

async fn healthz() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn create(State(svc): State<Arc<AnalysisService>>, body: Bytes) -> Response {
    let req: AnalysisRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::UNPROCESSABLE_ENTITY, format!("invalid request: {e}")),
    };
    match svc.create_analysis(req) {
        Ok(job_id) => (StatusCode::ACCEPTED, Json(json!({ "job_id": job_id }))).into_response(),
        Err(CreateError::Validation(m)) => error(StatusCode::UNPROCESSABLE_ENTITY, m),
        Err(CreateError::Overloaded) => error(StatusCode::TOO_MANY_REQUESTS, "job queue is full"),
        Err(CreateError::Store(e)) => internal(e),
    }
}

async fn status(State(svc): State<Arc<AnalysisService>>, Path(id): Path<String>) -> Response {
    match svc.job(&id) {
        Ok(Some(job)) => Json(json!({
            "job_id": job.job_id,
            "request": job.request,
            "state": job.state,
            "progress": job.progress,
            "message": job.message,
            "created_at": job.created_at,
            "updated_at": job.updated_at,
        }))
        .into_response(),
        Ok(None) => not_found(&id),
        Err(e) => internal(e),
    }
}

/// Stored result bytes, or the response to send instead.
#[allow(clippy::result_large_err)]
fn done_results(svc: &AnalysisService, id: &str) -> Result<Vec<u8>, Response> {
    let job = svc.job(id).map_err(internal)?.ok_or_else(|| not_found(id))?;
    if job.state != JobState::Done {
        return Err((
            StatusCode::CONFLICT,
            Json(json!({ "error": "analysis is not finished", "state": job.state })),
        )
            .into_response());
    }
    svc.store()
        .results(id)
        .map_err(internal)?
        .ok_or_else(|| error(StatusCode::INTERNAL_SERVER_ERROR, "results missing for finished analysis"))
}

async fn results(State(svc): State<Arc<AnalysisService>>, Path(id): Path<String>) -> Response {
    match done_results(&svc, &id) {
        Ok(body) => ([(header::CONTENT_TYPE, "application/json")], body).into_response(),
        Err(r) => r,
    }
}

async fn toxicity(State(svc): State<Arc<AnalysisService>>, Path(id): Path<String>) -> Response {
    let body = match done_results(&svc, &id) {
        Ok(b) => b,
        Err(r) => return r,
    };
    match serde_json::from_slice::<AnalysisResult>(&body) {
        Ok(r) => Json(r.toxicity).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn search_history(State(svc): State<Arc<AnalysisService>>, Path(id): Path<String>) -> Response {
    match svc.job(&id) {
        Ok(Some(_)) => {}
        Ok(None) => return not_found(&id),
        Err(e) => return internal(e),
    }
    match svc.store().history(&id) {
        Ok(h) => Json(h.unwrap_or_default()).into_response(),
        Err(e) => internal(e),
    }
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    last_event_id: Option<u64>,
}

fn sse_event(ev: &JobEvent) -> Event {
    Event::default()
        .id(ev.id.to_string())
        .event(ev.kind.as_str())
        .data(serde_json::to_string(ev).unwrap_or_default())
}

struct Tail {
    svc: Arc<AnalysisService>,
    id: String,
    cursor: u64,
    pending: VecDeque<JobEvent>,
    rx: Option<watch::Receiver<u64>>,
    finished: bool,
}

/// Replays stored events after `cursor`, then follows new ones until the
/// terminal event has been sent.
fn tail(t: Tail) -> impl Stream<Item = Result<Event, Infallible>> {
    stream::unfold(t, |mut t| async move {
        let ev = next_event(&mut t).await?;
        Some((Ok(sse_event(&ev)), t))
    })
}

async fn next_event(t: &mut Tail) -> Option<JobEvent> {
    loop {
        if let Some(ev) = t.pending.pop_front() {
            t.cursor = ev.id;
            if ev.is_terminal() {
                t.finished = true;
                t.pending.clear();
            }
            return Some(ev);
        }
        if t.finished {
            return None;
        }
        if let Some(rx) = t.rx.as_mut() {
            rx.borrow_and_update();
        }
        let fresh = t.svc.store().events_after(&t.id, t.cursor).ok()?;
        if !fresh.is_empty() {
            t.pending.extend(fresh);
            continue;
        }
        match t.rx.as_mut() {
            Some(rx) => rx.changed().await.ok()?,
            None => return None,
        }
    }
}

async fn events(
    State(svc): State<Arc<AnalysisService>>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> Response {
    let job = match svc.job(&id) {
        Ok(Some(j)) => j,
        Ok(None) => return not_found(&id),
        Err(e) => return internal(e),
    };
    let header_id = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<u64>().ok());
    let resume = header_id.or(q.last_event_id);
    let rx = svc.subscribe(&id);
    let mut pending = VecDeque::new();
    let cursor = match resume {
        Some(after) => after,
        None if job.state.is_terminal() => match svc.store().last_event(&id) {
            Ok(Some(last)) => {
                pending.push_back(last);
                u64::MAX
            }
            Ok(None) => 0,
            Err(e) => return internal(e),
        },
        None => 0,
    };
    let state = Tail {
        svc,
        id,
        cursor,
        pending,
        rx,
        finished: false,
    };
    Sse::new(tail(state)).keep_alive(KeepAlive::default()).into_response()
}
