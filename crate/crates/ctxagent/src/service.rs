//! JSON API over the session engine.
//!
//! Each session sits behind its own mutex so messages to one session are
//! handled strictly in order while different sessions run concurrently on
//! the blocking pool. Inspection endpoints read a snapshot that is swapped
//! in after every message, so they never wait on a turn in flight.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::{AllowOrigin, CorsLayer};

use ctxagent_core::backend::{Backend, BackendRegistry};
use ctxagent_core::dispatch::{ModeRegistry, ToolMode};
use ctxagent_core::eval::context_series;
use ctxagent_core::memory::Cso;
use ctxagent_core::schema::{self, BudgetMode};
use ctxagent_core::session::{CachePair, StopReason};
use ctxagent_core::tokenizer::Tokenizer;
use ctxagent_core::toolenv::ToolRegistry;
use ctxagent_core::turn::{read_jsonl, write_jsonl, Turn};
use ctxagent_core::{Session, SessionConfig, SessionError};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub bind_addr: String,
    pub backend_spec: String,
    pub max_sessions: usize,
    pub cors_origins: Vec<String>,
    /// Where trajectories, log text and records are persisted, if anywhere.
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Active,
    Closed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SessionRecord {
    pub id: String,
    pub mode: String,
    pub created_at: DateTime<Utc>,
    pub registry_id: String,
    pub status: SessionStatus,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn session_not_found(id: &str) -> Self {
        Self::new(
            StatusCode::NOT_FOUND,
            "SessionNotFound",
            format!("no session '{id}'"),
        )
    }

    fn registry_not_found(id: &str) -> Self {
        Self::new(
            StatusCode::NOT_FOUND,
            "RegistryNotFound",
            format!("no registry '{id}'"),
        )
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "BadRequest", message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "InternalError", message)
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::bad_request(r.body_text())
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        if e.is_backend_failure() {
            return Self::new(StatusCode::BAD_GATEWAY, "BackendFailure", e.to_string());
        }
        match e {
            SessionError::Closed => Self::new(StatusCode::CONFLICT, "SessionClosed", e.to_string()),
            other => Self::internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(json!({"code": self.code, "message": self.message})),
        )
            .into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Read-side copy of a session, refreshed after each message.
#[derive(Clone)]
struct Snapshot {
    cso: Cso,
    caches: CachePair,
    trajectory: Vec<Turn>,
}

impl Snapshot {
    fn of(s: &Session) -> Self {
        Self {
            cso: s.cso().clone(),
            caches: s.caches(),
            trajectory: s.trajectory().to_vec(),
        }
    }
}

struct Slot {
    record: RwLock<SessionRecord>,
    session: Mutex<Session>,
    snapshot: RwLock<Snapshot>,
}

impl Slot {
    fn record(&self) -> SessionRecord {
        self.record
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .clone()
    }

    fn snapshot(&self) -> Snapshot {
        self.snapshot
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .clone()
    }
}

pub struct AppState {
    registries: BTreeMap<String, Arc<ToolRegistry>>,
    backend_spec: String,
    backends: BackendRegistry,
    tokenizer: Arc<dyn Tokenizer>,
    max_sessions: usize,
    data_dir: Option<PathBuf>,
    sessions: RwLock<HashMap<String, Arc<Slot>>>,
}

impl AppState {
    pub fn new(
        registries: Vec<ToolRegistry>,
        backend_spec: impl Into<String>,
        tokenizer: Arc<dyn Tokenizer>,
        max_sessions: usize,
    ) -> Self {
        Self {
            registries: registries
                .into_iter()
                .map(|r| (r.id().to_string(), Arc::new(r)))
                .collect(),
            backend_spec: backend_spec.into(),
            backends: BackendRegistry::default(),
            tokenizer,
            max_sessions: max_sessions.max(1),
            data_dir: None,
            sessions: RwLock::new(HashMap::new()),
        }
    }

    pub fn with_data_dir(mut self, dir: PathBuf) -> Self {
        self.data_dir = Some(dir);
        self
    }

    pub fn registry_ids(&self) -> impl Iterator<Item = &str> {
        self.registries.keys().map(String::as_str)
    }

    fn registry(&self, id: &str) -> ApiResult<Arc<ToolRegistry>> {
        self.registries
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::registry_not_found(id))
    }

    fn slot(&self, id: &str) -> ApiResult<Arc<Slot>> {
        self.sessions
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::session_not_found(id))
    }

    fn build_backend(&self) -> ApiResult<Arc<dyn Backend>> {
        self.backends
            .build(&self.backend_spec)
            .map_err(|e| ApiError::new(StatusCode::BAD_GATEWAY, "BackendFailure", e.to_string()))
    }

    fn persist(&self, record: &SessionRecord, snap: &Snapshot) -> std::io::Result<()> {
        let Some(dir) = &self.data_dir else {
            return Ok(());
        };
        std::fs::create_dir_all(dir)?;
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &snap.trajectory)?;
        std::fs::write(dir.join(format!("{}.jsonl", record.id)), buf)?;
        std::fs::write(dir.join(format!("{}.cso.txt", record.id)), snap.cso.text())?;
        std::fs::write(
            dir.join(format!("{}.record.json", record.id)),
            serde_json::to_vec_pretty(record)?,
        )
    }

    /// Rebuilds every persisted session by replaying its trajectory. Returns
    /// the number of sessions restored.
    pub fn restore(&self) -> Result<usize, String> {
        let Some(dir) = &self.data_dir else {
            return Ok(0);
        };
        let Ok(entries) = std::fs::read_dir(dir) else {
            return Ok(0);
        };
        let mut restored = 0;
        for entry in entries.flatten() {
            let path = entry.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            let Some(id) = name.strip_suffix(".record.json") else {
                continue;
            };
            let read = |p: PathBuf| std::fs::read(&p).map_err(|e| format!("{}: {e}", p.display()));
            let record: SessionRecord =
                serde_json::from_slice(&read(path.clone())?).map_err(|e| format!("{name}: {e}"))?;
            let turns = read_jsonl(&read(dir.join(format!("{id}.jsonl")))?[..])
                .map_err(|e| format!("{id}.jsonl: {e}"))?;
            let registry = self.registry(&record.registry_id).map_err(|e| e.message)?;
            let mut session = Session::replay(&turns, registry, self.tokenizer.clone())
                .map_err(|e| format!("{id}: {e}"))?;
            if record.status == SessionStatus::Closed {
                session.close();
            } else {
                session.set_backend(self.build_backend().map_err(|e| e.message)?);
            }
            let slot = Slot {
                snapshot: RwLock::new(Snapshot::of(&session)),
                record: RwLock::new(record),
                session: Mutex::new(session),
            };
            self.sessions
                .write()
                .unwrap_or_else(|e| e.into_inner())
                .insert(id.to_string(), Arc::new(slot));
            restored += 1;
        }
        Ok(restored)
    }
}

pub fn router(state: Arc<AppState>, cors_origins: &[String]) -> Router {
    let app = Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session).delete(close_session))
        .route("/sessions/{id}/message", post(post_message))
        .route("/sessions/{id}/{facet}", get(inspect))
        .route("/registries", get(list_registries))
        .route("/registries/{id}/budget", get(registry_budget))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "NotFound", "no such endpoint") })
        .with_state(state);
    if cors_origins.is_empty() {
        return app;
    }
    let origin = if cors_origins.iter().any(|o| o == "*") {
        AllowOrigin::any()
    } else {
        AllowOrigin::list(
            cors_origins
                .iter()
                .filter_map(|o| HeaderValue::from_str(o).ok()),
        )
    };
    app.layer(
        CorsLayer::new()
            .allow_origin(origin)
            .allow_methods([Method::GET, Method::POST, Method::DELETE])
            .allow_headers([axum::http::header::CONTENT_TYPE]),
    )
}

#[derive(Debug, Default, Deserialize)]
#[serde(rename_all = "camelCase", default)]
struct CreateSession {
    mode: Option<String>,
    registry_id: Option<String>,
    /// Full session settings; `mode` wins over `config.mode` when both are set.
    config: Option<SessionConfig>,
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<SessionRecord>)> {
    let Json(req) = body?;
    let mut config = req.config.unwrap_or_default();
    if let Some(m) = &req.mode {
        config.mode = ModeRegistry::default()
            .get(m)
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "UnknownMode", e.to_string()))?;
    }
    let registry_id = match req.registry_id {
        Some(id) => id,
        None => state
            .registries
            .keys()
            .next()
            .cloned()
            .ok_or_else(|| ApiError::registry_not_found(""))?,
    };
    let registry = state.registry(&registry_id)?;
    let active = {
        let sessions = state.sessions.read().unwrap_or_else(|e| e.into_inner());
        sessions
            .values()
            .filter(|s| s.record().status == SessionStatus::Active)
            .count()
    };
    if active >= state.max_sessions {
        return Err(ApiError::new(
            StatusCode::TOO_MANY_REQUESTS,
            "CapacityExceeded",
            format!("{active} active sessions (limit {})", state.max_sessions),
        ));
    }
    let backend = state.build_backend()?;
    let id = ulid::Ulid::new().to_string();
    let mode_name = config.mode.name().to_string();
    let session = Session::new(
        id.clone(),
        config,
        registry,
        backend,
        state.tokenizer.clone(),
    )?;
    let record = SessionRecord {
        id: id.clone(),
        mode: mode_name,
        created_at: Utc::now(),
        registry_id,
        status: SessionStatus::Active,
    };
    let snap = Snapshot::of(&session);
    state
        .persist(&record, &snap)
        .map_err(|e| ApiError::internal(e.to_string()))?;
    let slot = Slot {
        record: RwLock::new(record.clone()),
        session: Mutex::new(session),
        snapshot: RwLock::new(snap),
    };
    state
        .sessions
        .write()
        .unwrap_or_else(|e| e.into_inner())
        .insert(id, Arc::new(slot));
    tracing::info!(session = %record.id, mode = %record.mode, "session created");
    Ok((StatusCode::CREATED, Json(record)))
}

async fn list_sessions(State(state): State<Arc<AppState>>) -> Json<Vec<SessionRecord>> {
    let sessions = state.sessions.read().unwrap_or_else(|e| e.into_inner());
    let mut out: Vec<SessionRecord> = sessions.values().map(|s| s.record()).collect();
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Json(out)
}

async fn get_session(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Json<SessionRecord>> {
    Ok(Json(state.slot(&id)?.record()))
}

async fn close_session(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Json<SessionRecord>> {
    let slot = state.slot(&id)?;
    let st = state.clone();
    // Waits for any turn in flight before closing.
    tokio::task::spawn_blocking(move || {
        slot.session
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .close();
        let record = {
            let mut r = slot.record.write().unwrap_or_else(|e| e.into_inner());
            r.status = SessionStatus::Closed;
            r.clone()
        };
        st.persist(&record, &slot.snapshot())
            .map_err(|e| ApiError::internal(e.to_string()))?;
        Ok(Json(record))
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?
}

#[derive(Debug, Deserialize)]
struct PostMessage {
    text: String,
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct MessageResponse {
    turns: Vec<Turn>,
    stop_reason: StopReason,
    repeated_errors: u32,
}

async fn post_message(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<PostMessage>, JsonRejection>,
) -> ApiResult<Json<MessageResponse>> {
    let Json(req) = body?;
    let slot = state.slot(&id)?;
    let st = state.clone();
    tokio::task::spawn_blocking(move || {
        let mut session = slot.session.lock().unwrap_or_else(|e| e.into_inner());
        let result = session.step_turn(&req.text);
        let snap = Snapshot::of(&session);
        drop(session);
        *slot.snapshot.write().unwrap_or_else(|e| e.into_inner()) = snap.clone();
        if let Err(e) = st.persist(&slot.record(), &snap) {
            tracing::warn!(session = %id, error = %e, "could not persist session");
        }
        let out = result?;
        Ok(Json(MessageResponse {
            turns: out.turns,
            stop_reason: out.stop_reason,
            repeated_errors: out.repeated_errors,
        }))
    })
    .await
    .map_err(|e| ApiError::internal(format!("turn handler failed: {e}")))?
}

async fn inspect(
    State(state): State<Arc<AppState>>,
    Path((id, facet)): Path<(String, String)>,
) -> ApiResult<Json<Value>> {
    let slot = state.slot(&id)?;
    let snap = slot.snapshot();
    let to_value =
        |v: Result<Value, serde_json::Error>| v.map_err(|e| ApiError::internal(e.to_string()));
    let out =
        match facet.as_str() {
            "cso" => json!({
                "text": snap.cso.text(),
                "version": snap.cso.version(),
                "entries": to_value(serde_json::to_value(snap.cso.entries()))?,
            }),
            "cache" => to_value(serde_json::to_value(&snap.caches))?,
            "trajectory" => to_value(serde_json::to_value(&snap.trajectory))?,
            "series" => to_value(serde_json::to_value(context_series(&snap.trajectory)))?,
            "budget" => {
                let record = slot.record();
                let registry = state.registry(&record.registry_id)?;
                let mode = ModeRegistry::default()
                    .get(&record.mode)
                    .map_err(|e| ApiError::internal(e.to_string()))?;
                let budget_mode = match mode.tool_mode {
                    ToolMode::FullSchemas => BudgetMode::FullCompact,
                    ToolMode::Jit => BudgetMode::NamesOnly,
                };
                let report = schema::registry_budget(
                    &registry.schemas_vec(),
                    budget_mode,
                    state.tokenizer.as_ref(),
                );
                json!({
                    "toolSection": to_value(serde_json::to_value(report))?,
                    "executorPermanentLen": snap.caches.executor.permanent_len,
                    "trackerPermanentLen": snap.caches.tracker.permanent_len,
                })
            }
            other => return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                "UnknownFacet",
                format!(
                    "unknown facet '{other}' (expected cso, cache, trajectory, series or budget)"
                ),
            )),
        };
    Ok(Json(out))
}

async fn list_registries(State(state): State<Arc<AppState>>) -> Json<Value> {
    let out: Vec<Value> = state
        .registries
        .values()
        .map(|r| json!({"id": r.id(), "tools": r.len(), "cloudToolId": r.cloud_tool_id()}))
        .collect();
    Json(Value::Array(out))
}

#[derive(Debug, Deserialize)]
struct BudgetQuery {
    mode: Option<String>,
}

async fn registry_budget(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<BudgetQuery>,
) -> ApiResult<Json<schema::TokenBudgetReport>> {
    let registry = state.registry(&id)?;
    let mode: BudgetMode = q
        .mode
        .as_deref()
        .unwrap_or("full-compact")
        .parse()
        .map_err(|e: String| ApiError::new(StatusCode::BAD_REQUEST, "UnknownBudgetMode", e))?;
    Ok(Json(schema::registry_budget(
        &registry.schemas_vec(),
        mode,
        state.tokenizer.as_ref(),
    )))
}

pub async fn serve(state: Arc<AppState>, config: &ServiceConfig) -> anyhow::Result<()> {
    let app = router(state, &config.cors_origins);
    let listener = tokio::net::TcpListener::bind(&config.bind_addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
