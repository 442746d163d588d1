//! HTTP/WebSocket front end for interactive sessions.
//!
//! Actions arrive only on `POST /v1/sessions/{id}/steps`. The stream socket is
//! push-only: after every step it receives one JSON text header followed by one
//! binary PNG message per frame.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use chunkplay::rollout::{create_session, export_transcript, Engine, SessionState, SharedSession};
use chunkplay::{ActionCommand, Chunk, Domain, EntityKind, Error};
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

/// What clients see of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub step_index: usize,
    pub entity: EntityKind,
    pub domain: Domain,
    pub seed: u64,
    pub checkpoint_id: String,
    /// Frames of the current chunk, base64-encoded PNG.
    pub frames: Vec<String>,
    pub last_latency_ms: Option<f64>,
    pub actions: Vec<ActionCommand>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct CreateRequest {
    pub entity: String,
    pub domain: String,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Checkpoint id the client expects; must match the loaded one.
    #[serde(default)]
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct StepRequest {
    pub action: String,
}

/// Header text message sent on the stream before a step's frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamHeader {
    pub session_id: String,
    pub step_index: usize,
    pub action: ActionCommand,
    pub latency_ms: f64,
    pub frames: usize,
}

#[derive(Debug, Clone)]
struct StreamEvent {
    header: String,
    frames: Vec<Vec<u8>>,
}

struct Entry {
    session: SharedSession,
    busy: AtomicBool,
    view: Mutex<SessionView>,
    stream: broadcast::Sender<StreamEvent>,
}

/// Clears the in-flight flag however the step handler exits.
struct BusyGuard(Arc<Entry>);

impl Drop for BusyGuard {
    fn drop(&mut self) {
        self.0.busy.store(false, Ordering::Release);
    }
}

pub struct AppState {
    engine: Option<Arc<Engine>>,
    sessions: RwLock<HashMap<String, Arc<Entry>>>,
}

impl AppState {
    /// `None` boots the service without a checkpoint; session creation then returns 503.
    pub fn new(engine: Option<Engine>) -> Arc<Self> {
        Arc::new(AppState { engine: engine.map(Arc::new), sessions: RwLock::new(HashMap::new()) })
    }

    /// Writes the transcript of every open session to `dir`; returns how many.
    pub fn export_transcripts(&self, dir: &std::path::Path) -> chunkplay::Result<usize> {
        let entries: Vec<_> = self.sessions.read().unwrap_or_else(|p| p.into_inner()).iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        for (id, entry) in &entries {
            export_transcript(dir, id, &entry.session.snapshot())?;
        }
        Ok(entries.len())
    }

    fn get(&self, id: &str) -> Option<Arc<Entry>> {
        self.sessions.read().unwrap_or_else(|p| p.into_inner()).get(id).cloned()
    }
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    field: Option<&'static str>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    field: Option<&'static str>,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, field: None, message: message.into() }
    }

    fn field(field: &'static str, message: impl Into<String>) -> Self {
        ApiError { status: StatusCode::UNPROCESSABLE_ENTITY, field: Some(field), message: message.into() }
    }

    fn not_found(id: &str) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, format!("no session {id}"))
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        match e {
            Error::UnknownEntity(_) => ApiError::field("entity", message),
            Error::UnknownDomain(_) | Error::EntityDomainMismatch { .. } => ApiError::field("domain", message),
            Error::UnknownAction(_) | Error::ZeroAction => ApiError::field("action", message),
            Error::StepInFlight(_) => ApiError::new(StatusCode::CONFLICT, message),
            _ => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, message),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::new(r.status(), r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.message, field: self.field })).into_response()
    }
}

fn encode_chunk(chunk: &Chunk) -> Result<Vec<Vec<u8>>, ApiError> {
    chunk.frames.iter().map(|f| f.to_png().map_err(ApiError::from)).collect()
}

fn view_of(state: &SessionState, id: &str) -> Result<SessionView, ApiError> {
    Ok(SessionView {
        session_id: id.to_string(),
        step_index: state.step_index(),
        entity: state.entity,
        domain: state.domain,
        seed: state.seed,
        checkpoint_id: state.checkpoint_id.clone(),
        frames: encode_chunk(&state.current)?.iter().map(|b| BASE64.encode(b)).collect(),
        last_latency_ms: state.latencies_ms.last().copied(),
        actions: state.history.iter().map(|(a, _)| *a).collect(),
    })
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/sessions", post(create))
        .route("/v1/sessions/{id}", get(show).delete(remove))
        .route("/v1/sessions/{id}/steps", post(step))
        .route("/v1/sessions/{id}/stream", get(stream))
        .with_state(state)
}

/// Binds `addr` and serves until ctrl-c.
pub async fn serve(addr: &str, state: Arc<AppState>) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

async fn health(State(app): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let sessions = app.sessions.read().unwrap_or_else(|p| p.into_inner()).len();
    Json(serde_json::json!({
        "status": "ok",
        "checkpoint_loaded": app.engine.is_some(),
        "checkpoint_id": app.engine.as_ref().map(|e| e.checkpoint_id.clone()),
        "sessions": sessions,
    }))
}

async fn create(
    State(app): State<Arc<AppState>>,
    body: Result<Json<CreateRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<SessionView>), ApiError> {
    let Json(req) = body?;
    let entity: EntityKind = req.entity.parse()?;
    let domain: Domain = req.domain.parse()?;
    chunkplay::worldsim::check_entity_domain(entity, domain)?;
    let engine = app
        .engine
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no checkpoint loaded"))?;
    if let Some(want) = &req.checkpoint {
        if *want != engine.checkpoint_id {
            return Err(ApiError::field("checkpoint", format!("checkpoint {want} is not loaded (serving {})", engine.checkpoint_id)));
        }
    }
    let seed = req.seed.unwrap_or_else(rand::random);
    let mut state = tokio::task::spawn_blocking(move || create_session(&engine, entity, domain, seed))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    state.id = uuid::Uuid::new_v4().simple().to_string();
    let view = view_of(&state, &state.id)?;
    let entry = Arc::new(Entry {
        session: SharedSession::new(state),
        busy: AtomicBool::new(false),
        view: Mutex::new(view.clone()),
        stream: broadcast::channel(16).0,
    });
    app.sessions.write().unwrap_or_else(|p| p.into_inner()).insert(view.session_id.clone(), entry);
    Ok((StatusCode::CREATED, Json(view)))
}

async fn show(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    let entry = app.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let view = entry.view.lock().unwrap_or_else(|p| p.into_inner()).clone();
    Ok(Json(view))
}

async fn remove(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    match app.sessions.write().unwrap_or_else(|p| p.into_inner()).remove(&id) {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(ApiError::not_found(&id)),
    }
}

async fn step(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<StepRequest>, JsonRejection>,
) -> Result<Json<SessionView>, ApiError> {
    let entry = app.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let Json(req) = body?;
    let action: ActionCommand = req.action.parse()?;
    if entry.busy.swap(true, Ordering::AcqRel) {
        return Err(Error::StepInFlight(id).into());
    }
    let _guard = BusyGuard(entry.clone());
    let engine = app.engine.clone().ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no checkpoint loaded"))?;
    let worker = entry.clone();
    let (state, chunk) = tokio::task::spawn_blocking(move || worker.session.step(&engine, action))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let view = view_of(&state, &id)?;
    *entry.view.lock().unwrap_or_else(|p| p.into_inner()) = view.clone();
    let header = StreamHeader {
        session_id: id,
        step_index: view.step_index,
        action,
        latency_ms: view.last_latency_ms.unwrap_or_default(),
        frames: chunk.len(),
    };
    // no subscribers is not an error
    let _ = entry.stream.send(StreamEvent {
        header: serde_json::to_string(&header).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?,
        frames: encode_chunk(&chunk)?,
    });
    Ok(Json(view))
}

async fn stream(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    ws: WebSocketUpgrade,
) -> Result<Response, ApiError> {
    let entry = app.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    // subscribe before the handshake completes so no step after it is missed
    let rx = entry.stream.subscribe();
    drop(entry);
    Ok(ws.on_upgrade(move |socket| push_frames(socket, rx)))
}

async fn push_frames(mut socket: WebSocket, mut rx: broadcast::Receiver<StreamEvent>) {
    loop {
        tokio::select! {
            event = rx.recv() => match event {
                Ok(ev) => {
                    if socket.send(Message::Text(ev.header.into())).await.is_err() {
                        return;
                    }
                    for f in ev.frames {
                        if socket.send(Message::Binary(f.into())).await.is_err() {
                            return;
                        }
                    }
                }
                Err(broadcast::error::RecvError::Lagged(_)) => continue,
                Err(broadcast::error::RecvError::Closed) => break,
            },
            incoming = socket.recv() => match incoming {
                // inbound messages are ignored; actions use the HTTP route
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                Some(Ok(_)) => {}
            },
        }
    }
    let _ = socket.send(Message::Close(None)).await;
}
