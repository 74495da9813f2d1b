//! JSON-over-HTTP session service.
//!
//! - `POST /sessions` creates a session and returns its state (201).
//! - `GET /sessions/{id}` returns the state.
//! - `POST /sessions/{id}/decision` applies `{"delta": ..}` or `{"u": [..]}`,
//!   optionally with `"t"`, and returns the next state.
//!
//! Rejected decisions answer 422 with the admissible set, unknown ids 404,
//! stale or finished sessions 409.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use weakloop_core::{AdmissibleSet, Case, Choice, Error, ScenarioConfig, SessionStore};

#[derive(Debug, Clone)]
pub struct AppState {
    pub store: Arc<SessionStore>,
    /// Base scenario for new sessions.
    pub config: Arc<ScenarioConfig>,
}

impl AppState {
    pub fn new(config: ScenarioConfig, store: SessionStore) -> Self {
        Self { store: Arc::new(store), config: Arc::new(config) }
    }
}

/// Body of `POST /sessions`; every field is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    /// Replaces the server's base scenario.
    pub config: Option<ScenarioConfig>,
    /// Reference case 1-4 applied to the scenario.
    pub case: Option<u8>,
    pub seed: Option<u64>,
}

/// Body of `POST /sessions/{id}/decision`.
#[derive(Debug, Deserialize)]
pub struct DecisionRequest {
    #[serde(flatten)]
    pub choice: Choice,
    /// Step the decision is meant for; a mismatch is a conflict.
    pub t: Option<usize>,
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
    kind: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    set: Option<AdmissibleSet>,
}

pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, error: impl Into<String>) -> Self {
        Self { status, body: ErrorBody { error: error.into(), kind, set: None } }
    }

    fn with_set(mut self, set: Option<AdmissibleSet>) -> Self {
        self.body.set = set;
        self
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, kind) = match &e {
            Error::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            Error::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            Error::NotAdmissible { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "not_admissible"),
            Error::Selection(_) | Error::Dimension(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_choice"),
            Error::Config(_) | Error::Parse { .. } => (StatusCode::BAD_REQUEST, "bad_config"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError::new(status, kind, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

fn parse_body<T: for<'de> Deserialize<'de> + Default>(body: &Bytes) -> Result<T, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.to_string()))
}

async fn create_session(State(app): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: CreateRequest = parse_body(&body)?;
    let mut cfg = req.config.unwrap_or_else(|| (*app.config).clone());
    if let Some(n) = req.case {
        let case = Case::from_number(n)
            .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "bad_config", format!("case must be 1-4, got {n}")))?;
        cfg = cfg.for_case(case)?;
    }
    if let Some(seed) = req.seed {
        cfg.seed = seed;
    }
    let view = app.store.create(&cfg)?;
    tracing::info!(id = %view.id, label = %cfg.label, "session created");
    Ok((StatusCode::CREATED, Json(view)).into_response())
}

async fn session_state(State(app): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(app.store.state(&id)?).into_response())
}

async fn session_decision(State(app): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let req: DecisionRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.to_string()))?;
    let result = app.store.with_session(&id, |s| match s.decide(req.choice, req.t) {
        Ok(_) => Ok(Ok(s.state())),
        Err(e @ (Error::NotAdmissible { .. } | Error::Selection(_) | Error::Dimension(_))) => {
            Ok(Err(ApiError::from(e).with_set(s.pending_set().cloned())))
        }
        Err(e) => Err(e),
    })?;
    match result {
        Ok(view) => {
            tracing::debug!(id = %id, t = view.t, "decision applied");
            Ok(Json(view).into_response())
        }
        Err(rejected) => {
            tracing::info!(id = %id, "decision rejected");
            Err(rejected)
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session_state))
        .route("/sessions/{id}/decision", post(session_decision))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route") })
        .with_state(state)
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(state: AppState, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state)).await
}
