//! JSON-over-HTTP front end for a [`System`].
//!
//! | method | path | body / query |
//! |---|---|---|
//! | POST | `/things` | raw document JSON |
//! | GET | `/moderation/next` | header `X-Moderator` |
//! | POST | `/moderation/{task_id}/review` | review decision JSON, header `X-Moderator` |
//! | GET | `/search` | `q`, `threshold`, `group`, `page`, `page_size`, `hide_flagged` |
//! | GET | `/things/{id}/explanation` | optional `X-Moderator` |
//! | GET | `/thresholds` | |
//! | GET | `/examples` | `threshold`, `n`, `seed` |
//! | GET | `/audit/export` | |
//!
//! Errors come back as `{"error": CODE, "message": text}`.

use std::net::SocketAddr;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{Requester, SearchQuery, ServiceError, System};
use crate::corpus::{IngestStatus, RawDocument, ThingDocument};
use crate::moderation::{ModerationError, ReviewDecision, ReviewTask};

pub const MODERATOR_HEADER: &str = "x-moderator";

pub type Clock = Arc<dyn Fn() -> DateTime<Utc> + Send + Sync>;

#[derive(Clone)]
pub struct AppState {
    pub system: Arc<RwLock<System>>,
    pub clock: Clock,
}

impl AppState {
    pub fn new(system: System) -> Self {
        Self { system: Arc::new(RwLock::new(system)), clock: Arc::new(Utc::now) }
    }

    pub fn with_clock(system: System, clock: Clock) -> Self {
        Self { system: Arc::new(RwLock::new(system)), clock }
    }
}

pub struct ApiError(pub ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        Self(e)
    }
}

impl From<ModerationError> for ApiError {
    fn from(e: ModerationError) -> Self {
        Self(e.into())
    }
}

#[derive(Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

pub fn status_for(code: &str) -> StatusCode {
    match code {
        "NOT_FOUND" | "QUEUE_EMPTY" => StatusCode::NOT_FOUND,
        "UNAUTHORIZED" => StatusCode::UNAUTHORIZED,
        "LEASE_VIOLATION" => StatusCode::FORBIDDEN,
        "STALE_TASK" | "DUPLICATE_TASK_FOR_THING" | "NO_MODEL" => StatusCode::CONFLICT,
        "INVALID_DECISION" => StatusCode::UNPROCESSABLE_ENTITY,
        "BAD_THRESHOLD"
        | "BAD_REQUEST"
        | "UNKNOWN_GROUP"
        | "UNKNOWN_CATEGORY"
        | "MISSING_ID"
        | "EMPTY_DOCUMENT"
        | "MALFORMED_FIELD"
        | "INSUFFICIENT_POSITIVES"
        | "INSUFFICIENT_NEGATIVES"
        | "HASH_PARAM_MISMATCH" => StatusCode::BAD_REQUEST,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let code = self.0.code();
        let status = status_for(code);
        if status.is_server_error() {
            tracing::error!(error = %self.0, "request failed");
        }
        (status, Json(ErrorBody { error: code.to_owned(), message: self.0.to_string() })).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn bad_query(e: QueryRejection) -> ApiError {
    ApiError(ServiceError::BadRequest(e.body_text()))
}

fn requester(system: &System, headers: &HeaderMap) -> ApiResult<Requester> {
    match headers.get(MODERATOR_HEADER) {
        None => Ok(Requester::EndUser),
        Some(v) => {
            let token = v.to_str().map_err(|_| ApiError(ServiceError::Unauthorized))?;
            let m = system.moderator_for_token(token).ok_or(ApiError(ServiceError::Unauthorized))?;
            Ok(Requester::Moderator(m.clone()))
        }
    }
}

fn moderator_id(system: &System, headers: &HeaderMap) -> ApiResult<String> {
    match requester(system, headers)? {
        Requester::Moderator(m) => Ok(m.id),
        Requester::EndUser => Err(ApiError(ServiceError::Unauthorized)),
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/things", post(ingest))
        .route("/things/{id}/explanation", get(explanation))
        .route("/moderation/next", get(next_task))
        .route("/moderation/{task_id}/review", post(review))
        .route("/search", get(search))
        .route("/thresholds", get(thresholds))
        .route("/examples", get(examples))
        .route("/audit/export", get(audit_export))
        .with_state(state)
}

pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(state)).await
}

async fn ingest(State(st): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let text =
        std::str::from_utf8(&body).map_err(|_| ApiError(ServiceError::BadRequest("body is not UTF-8".into())))?;
    let raw = RawDocument::from_json(text).map_err(|e| ApiError(e.into()))?;
    let now = (st.clock)();
    let out = st.system.write().expect("lock poisoned").ingest_and_enqueue(raw, now)?;
    let status = if out.status == IngestStatus::Unchanged { StatusCode::OK } else { StatusCode::CREATED };
    Ok((status, Json(out)).into_response())
}

#[derive(Serialize)]
pub struct NextTask {
    pub task: ReviewTask,
    pub thing: ThingDocument,
}

async fn next_task(State(st): State<AppState>, headers: HeaderMap) -> ApiResult<Json<NextTask>> {
    let now = (st.clock)();
    let mut system = st.system.write().expect("lock poisoned");
    let id = moderator_id(&system, &headers)?;
    let task = system.next_task(&id, now)?;
    let thing = system.store().get(&task.thing_id).expect("tasks reference stored things").as_ref().clone();
    Ok(Json(NextTask { task, thing }))
}

async fn review(
    State(st): State<AppState>,
    Path(task_id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Response> {
    let decision: ReviewDecision = serde_json::from_slice(&body)
        .map_err(|e| ApiError(ModerationError::InvalidDecision(format!("malformed decision: {e}")).into()))?;
    if decision.task_id != task_id {
        return Err(ApiError(ServiceError::BadRequest(format!(
            "path task `{task_id}` differs from body task `{}`",
            decision.task_id
        ))));
    }
    let now = (st.clock)();
    let mut system = st.system.write().expect("lock poisoned");
    let id = moderator_id(&system, &headers)?;
    if decision.moderator_id != id {
        return Err(ModerationError::LeaseViolation { task_id, moderator_id: decision.moderator_id }.into());
    }
    let out = system.submit_review(decision, now)?;
    Ok(Json(out).into_response())
}

async fn search(
    State(st): State<AppState>,
    headers: HeaderMap,
    query: Result<Query<SearchQuery>, QueryRejection>,
) -> ApiResult<Response> {
    let Query(query) = query.map_err(bad_query)?;
    let system = st.system.read().expect("lock poisoned");
    let who = requester(&system, &headers)?;
    Ok(Json(system.search(&query, &who)?).into_response())
}

async fn explanation(State(st): State<AppState>, Path(id): Path<String>, headers: HeaderMap) -> ApiResult<Response> {
    let system = st.system.read().expect("lock poisoned");
    let who = requester(&system, &headers)?;
    Ok(Json(system.explanation(&id, &who)?).into_response())
}

async fn thresholds(State(st): State<AppState>) -> Response {
    let system = st.system.read().expect("lock poisoned");
    Json(serde_json::json!({ "profiles": system.thresholds() })).into_response()
}

#[derive(Deserialize)]
pub struct ExamplesQuery {
    pub threshold: f64,
    #[serde(default = "default_examples")]
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_examples() -> usize {
    6
}

async fn examples(
    State(st): State<AppState>,
    query: Result<Query<ExamplesQuery>, QueryRejection>,
) -> ApiResult<Response> {
    let Query(q) = query.map_err(bad_query)?;
    let system = st.system.read().expect("lock poisoned");
    Ok(Json(system.threshold_examples(q.threshold, q.n, q.seed)?).into_response())
}

async fn audit_export(State(st): State<AppState>) -> ApiResult<Response> {
    let mut buf = Vec::new();
    st.system.read().expect("lock poisoned").export_audit(&mut buf)?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], buf).into_response())
}
