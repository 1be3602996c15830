use std::collections::HashMap;
use std::convert::Infallible;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use scopilot_core::corpus::SectionName;
use scopilot_core::orchestrator::{
    export, CitationAction, DecodeConfig, ExportFormat, GenerationEvent, OrchestratorError, Resources, SessionState,
    Status,
};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::{mpsc, Semaphore};
use tokio_stream::wrappers::ReceiverStream;

use crate::store::{ApiSession, SessionStore, StoreError};

pub const DEFAULT_GENERATION_CAP: usize = 2;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub index: PathBuf,
    pub metadata: PathBuf,
    pub bind: SocketAddr,
    pub generation_cap: usize,
}

#[derive(Clone)]
pub struct AppState {
    pub resources: Arc<Resources>,
    pub store: Arc<SessionStore>,
    generation: Arc<Semaphore>,
}

impl AppState {
    pub fn new(resources: Arc<Resources>, store: Arc<SessionStore>, generation_cap: usize) -> Self {
        Self { resources, store, generation: Arc::new(Semaphore::new(generation_cap.max(1))) }
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("no session {id}"))
    }

    fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }
}

impl From<OrchestratorError> for ApiError {
    fn from(e: OrchestratorError) -> Self {
        use OrchestratorError as E;
        let status = match &e {
            E::Paused | E::NotPaused | E::Finished | E::ContextLimit(_) => StatusCode::CONFLICT,
            E::NotACandidate { .. } | E::UnknownRef(_) | E::Invalid(_) | E::Format(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            E::StaleIndex { .. } | E::Model(_) | E::Index(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if self.status == StatusCode::SERVICE_UNAVAILABLE {
            body["status"] = json!("busy");
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/healthz", get(healthz))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/steps", post(step_session))
        .route("/v1/sessions/{id}/citation", post(resolve_citation))
        .route("/v1/sessions/{id}/export", get(export_session))
        .with_state(state)
}

/// Loads resources and the session store, then serves until the process exits.
pub async fn serve(config: ServiceConfig) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    let resources = Resources::load(&config.checkpoint, &config.index, &config.metadata)?;
    let store = SessionStore::open(&config.data_dir.join("sessions"))?;
    let state = AppState::new(Arc::new(resources), Arc::new(store), config.generation_cap);
    let listener = tokio::net::TcpListener::bind(config.bind).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}

async fn healthz(State(st): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "sessions": st.store.len(),
        "checkpoint": st.resources.checkpoint_id,
    }))
}

#[derive(Debug, Deserialize)]
struct CreateBody {
    title: String,
    #[serde(default, rename = "abstract")]
    abstract_text: Option<String>,
    #[serde(default)]
    section: Option<String>,
    #[serde(default)]
    owner: String,
    #[serde(default)]
    config: DecodeConfig,
    #[serde(default)]
    seed: u64,
}

#[derive(Serialize)]
struct SessionView {
    #[serde(flatten)]
    session: ApiSession,
    draft: String,
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::invalid(format!("malformed request body: {e}")))
}

async fn create_session(State(st): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let b: CreateBody = parse_json(&body)?;
    let section: SectionName = b
        .section
        .as_deref()
        .unwrap_or("introduction")
        .parse()
        .map_err(|e: scopilot_core::corpus::CorpusError| ApiError::invalid(e.to_string()))?;
    let id = uuid::Uuid::new_v4().simple().to_string();
    let state = SessionState::new(
        id.clone(),
        &st.resources.vocab,
        &b.title,
        b.abstract_text.as_deref().filter(|a| !a.trim().is_empty()),
        section,
        b.config,
        b.seed,
    )?;
    let session = ApiSession::new(state, b.owner);
    let store = st.store.clone();
    tokio::task::spawn_blocking(move || store.create(session)).await.expect("store task")?;
    Ok((StatusCode::CREATED, Json(json!({ "session_id": id }))))
}

async fn get_session(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SessionView>> {
    let slot = st.store.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let session = slot.snapshot();
    let draft = export(&session.state, &st.resources.vocab, &st.resources.metadata, ExportFormat::Tex)?;
    Ok(Json(SessionView { session, draft }))
}

#[derive(Debug, Default, Deserialize)]
struct StepBody {
    #[serde(default)]
    max_new_tokens: Option<usize>,
}

fn error_line(message: &str) -> Bytes {
    let mut s = json!({ "kind": "error", "payload": message }).to_string();
    s.push('\n');
    Bytes::from(s)
}

async fn step_session(State(st): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let b: StepBody = if body.iter().all(u8::is_ascii_whitespace) { StepBody::default() } else { parse_json(&body)? };
    let slot = st.store.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let guard = slot
        .try_begin()
        .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, format!("session {id} already has a request in flight")))?;
    let permit =
        st.generation.clone().try_acquire_owned().map_err(|_| {
            ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "generation capacity reached; retry shortly")
        })?;
    let current = guard.snapshot();
    if current.state.status == Status::PausedAtRet {
        return Err(OrchestratorError::Paused.into());
    }
    let budget = b.max_new_tokens.unwrap_or(current.state.decode.max_new_tokens);
    let (tx, rx) = mpsc::channel::<Result<Bytes, Infallible>>(32);
    let resources = st.resources.clone();
    let store = st.store.clone();
    tokio::task::spawn_blocking(move || {
        let _permit = permit;
        let mut next = current.clone();
        let orch = match resources.orchestrator() {
            Ok(o) => o,
            Err(e) => {
                let _ = tx.blocking_send(Ok(error_line(&e.to_string())));
                return;
            }
        };
        let mut terminal: Option<GenerationEvent> = None;
        let result = orch.step_with(&mut next.state, budget, |e| {
            if e.is_terminal() {
                terminal = Some(e.clone());
            } else {
                let _ = tx.blocking_send(Ok(Bytes::from(e.to_ndjson())));
            }
        });
        let line = match result.map_err(|e| e.to_string()).and_then(|_| {
            store.commit(&guard, next).map_err(|e| e.to_string())?;
            Ok(terminal.expect("step ends with a terminal event"))
        }) {
            Ok(t) => Bytes::from(t.to_ndjson()),
            Err(m) => error_line(&m),
        };
        drop(guard);
        let _ = tx.blocking_send(Ok(line));
    });
    Ok(Response::builder()
        .status(StatusCode::OK)
        .header(header::CONTENT_TYPE, "application/x-ndjson")
        .body(Body::from_stream(ReceiverStream::new(rx)))
        .expect("static response parts"))
}

async fn resolve_citation(
    State(st): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<serde_json::Value>> {
    let action: CitationAction = parse_json(&body)?;
    let slot = st.store.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let guard = slot
        .try_begin()
        .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, format!("session {id} already has a request in flight")))?;
    let resources = st.resources.clone();
    let store = st.store.clone();
    tokio::task::spawn_blocking(move || -> ApiResult<Json<serde_json::Value>> {
        let mut next = guard.snapshot();
        let events = resources.orchestrator()?.resolve_citation(&mut next.state, &action)?;
        let saved = store.commit(&guard, next)?;
        Ok(Json(json!({
            "status": saved.state.status,
            "accepted": saved.state.accepted,
            "events": events,
        })))
    })
    .await
    .expect("citation task")
}

async fn export_session(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    let format: ExportFormat = q
        .get("format")
        .ok_or_else(|| ApiError::invalid("missing format query parameter; allowed: tex, bib"))?
        .parse()?;
    let slot = st.store.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let text = export(&slot.snapshot().state, &st.resources.vocab, &st.resources.metadata, format)?;
    Ok(([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], text).into_response())
}
