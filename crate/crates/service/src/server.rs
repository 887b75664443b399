//! HTTP and WebSocket surface over the engine thread.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures_util::{SinkExt, StreamExt};
use serde::Deserialize;
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::broadcast::error::RecvError;

use stagehand_core::actuation::{FakeBridge, PhysicalBinding};
use stagehand_core::config::{BindingConfig, ConfigError, EngineConfig};
use stagehand_core::director::ActuatorKind;
use stagehand_core::engine::{replay, Engine, EngineError, EngineOptions, ExecutorKind, Storage};
use stagehand_core::ingest::{decode_batch, decode_sensor_message};
use stagehand_core::memory::Annotation;
use stagehand_core::provider::LanguageModelProvider;
use stagehand_core::session_log::read_log;

use crate::runtime::{replay_progress_frame, ApiError, EngineHandle, EngineThread, Request};

#[derive(Debug, Error)]
pub enum ServeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error("fake bridge: {0}")]
    Bridge(std::io::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

pub struct ServeOptions {
    pub config: EngineConfig,
    pub bind: SocketAddr,
    /// Start a fake Hue bridge on this port (0 picks one) and bind every
    /// actuator to it.
    pub fake_bridge: Option<u16>,
    pub session_id: Option<String>,
    pub storage: Storage,
    pub log_full_prompts: bool,
    pub crash_after_persist: bool,
    pub provider: Option<Arc<dyn LanguageModelProvider>>,
}

impl ServeOptions {
    pub fn new(config: EngineConfig) -> Self {
        Self {
            config,
            bind: SocketAddr::from(([127, 0, 0, 1], 0)),
            fake_bridge: None,
            session_id: None,
            storage: Storage::Directory,
            log_full_prompts: false,
            crash_after_persist: false,
            provider: None,
        }
    }
}

/// Points every actuator at the fake bridge: lights over the Hue subset,
/// relays as webhooks.
pub fn bind_to_bridge(config: &mut EngineConfig, base_url: &str) {
    let mut light_no = 0;
    config.bindings = config
        .actuators
        .iter()
        .map(|a| {
            let binding = match a.kind {
                ActuatorKind::Light => {
                    light_no += 1;
                    PhysicalBinding::Hue {
                        bridge: base_url.to_string(),
                        key: "stagehand".into(),
                        physical_id: light_no.to_string(),
                    }
                }
                ActuatorKind::Relay => PhysicalBinding::Webhook {
                    webhook: format!("{base_url}/relay/{}", a.id),
                },
            };
            BindingConfig {
                actuator: a.id.clone(),
                binding,
            }
        })
        .collect();
}

#[derive(Clone)]
struct AppState {
    engine: EngineHandle,
    config: Arc<EngineConfig>,
}

pub struct Server {
    addr: SocketAddr,
    engine: Option<EngineThread>,
    runtime: Option<tokio::runtime::Runtime>,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    bridge: Option<FakeBridge>,
    session_dir: Option<PathBuf>,
}

impl Server {
    /// Opens a session, starts the tick loop and begins listening.
    pub fn start(opts: ServeOptions) -> Result<Self, ServeError> {
        let mut config = opts.config;
        config.validate()?;
        if opts.log_full_prompts {
            config.log_full_prompts = true;
        }
        let bridge = match opts.fake_bridge {
            Some(port) => {
                let b = FakeBridge::start(port).map_err(ServeError::Bridge)?;
                bind_to_bridge(&mut config, &b.base_url());
                log::info!("fake bridge on {}", b.base_url());
                Some(b)
            }
            None => None,
        };
        let provider = match opts.provider {
            Some(p) => p,
            None => config.provider.build()?,
        };
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .enable_all()
            .thread_name("stagehand-http")
            .build()?;
        let listener = runtime
            .block_on(tokio::net::TcpListener::bind(opts.bind))
            .map_err(|source| ServeError::Bind { addr: opts.bind, source })?;
        let addr = listener.local_addr()?;

        let engine = Engine::new(
            config.clone(),
            provider,
            EngineOptions {
                session_id: opts.session_id,
                storage: opts.storage,
                executor: ExecutorKind::Threaded,
                interpret_framing: true,
                crash_after_persist: opts.crash_after_persist,
            },
        )?;
        let session_dir = engine.session_dir().cloned();
        if let Some(dir) = &session_dir {
            let text = serde_json::to_string_pretty(&config).map_err(std::io::Error::other)?;
            std::fs::write(dir.join("config.json"), text)?;
        }
        let thread = EngineThread::spawn(engine);
        let state = AppState {
            engine: thread.handle.clone(),
            config: Arc::new(config),
        };
        let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
        let app = router(state);
        runtime.spawn(async move {
            let served = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = stopped.await;
                })
                .await;
            if let Err(e) = served {
                log::error!("http server: {e}");
            }
        });
        log::info!("listening on http://{addr}");
        Ok(Self {
            addr,
            engine: Some(thread),
            runtime: Some(runtime),
            stop: Some(stop),
            bridge,
            session_dir,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn session(&self) -> &str {
        self.engine.as_ref().map(|e| e.handle.session()).unwrap_or("")
    }

    pub fn session_dir(&self) -> Option<&Path> {
        self.session_dir.as_deref()
    }

    pub fn bridge(&self) -> Option<&FakeBridge> {
        self.bridge.as_ref()
    }

    pub fn handle(&self) -> Option<&EngineHandle> {
        self.engine.as_ref().map(|e| &e.handle)
    }

    /// Blocks until SIGINT.
    pub fn wait_for_interrupt(&self) {
        if let Some(rt) = &self.runtime {
            let _ = rt.block_on(tokio::signal::ctrl_c());
        }
    }

    /// Stops listening, closes the session log and waits for both.
    pub fn shutdown(mut self) -> Result<(), ApiError> {
        self.stop_all()
    }

    fn stop_all(&mut self) -> Result<(), ApiError> {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        let result = match self.engine.take() {
            Some(e) => e.shutdown().map(|_| ()),
            None => Ok(()),
        };
        if let Some(rt) = self.runtime.take() {
            rt.shutdown_timeout(std::time::Duration::from_secs(2));
        }
        result
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.stop_all();
    }
}

// ---------------------------------------------------------------------------
// Routes

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.body)).into_response()
    }
}

type ApiResult = Result<Json<Value>, ApiError>;

fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/state", get(|s: State<AppState>| call(s, Request::State)))
        .route("/api/heatgrid", get(|s: State<AppState>| call(s, Request::Heatgrid)))
        .route("/api/dramaturgy", post(framing))
        .route("/api/dramaturgy/clarify", post(clarify))
        .route("/api/director/commands", post(command))
        .route("/api/annotations", post(annotate))
        .route("/api/score/consolidate", post(|s: State<AppState>| call(s, Request::Consolidate)))
        .route("/api/score", get(|s: State<AppState>| call(s, Request::Score)))
        .route("/api/sessions", get(sessions))
        .route("/api/replay", post(replay_session))
        .route("/api/panic", post(|s: State<AppState>| call(s, Request::Panic)))
        .route("/api/sensors", post(sensor_batch))
        .route("/ws/sensors", get(ws_sensors))
        .route("/ws/console", get(ws_console))
        .with_state(state)
}

async fn call(State(state): State<AppState>, request: Request) -> ApiResult {
    state.engine.call(request).await.map(Json)
}

async fn health(State(state): State<AppState>) -> Json<Value> {
    Json(json!({ "status": "ok", "session": state.engine.session() }))
}

#[derive(Debug, Deserialize)]
struct TextBody {
    text: String,
}

#[derive(Debug, Deserialize)]
struct ClarifyBody {
    question_id: String,
    answer: String,
}

#[derive(Debug, Deserialize)]
struct AnnotationBody {
    exchange: String,
    annotation: Annotation,
    #[serde(default)]
    note: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ReplayBody {
    session: String,
}

fn bad_json(e: impl std::fmt::Display) -> ApiError {
    ApiError::new(400, format!("malformed request body: {e}"))
}

fn parse<T: for<'de> Deserialize<'de>>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(bad_json)
}

async fn framing(s: State<AppState>, body: axum::body::Bytes) -> ApiResult {
    let b: TextBody = parse(&body)?;
    call(s, Request::Framing(b.text)).await
}

async fn clarify(s: State<AppState>, body: axum::body::Bytes) -> ApiResult {
    let b: ClarifyBody = parse(&body)?;
    call(
        s,
        Request::Clarify {
            question_id: b.question_id,
            answer: b.answer,
        },
    )
    .await
}

async fn command(s: State<AppState>, body: axum::body::Bytes) -> ApiResult {
    let b: TextBody = parse(&body)?;
    call(s, Request::Command(b.text)).await
}

async fn annotate(s: State<AppState>, body: axum::body::Bytes) -> ApiResult {
    let b: AnnotationBody = parse(&body)?;
    call(
        s,
        Request::Annotate {
            exchange: b.exchange,
            annotation: b.annotation,
            note: b.note,
        },
    )
    .await
}

/// Newline-delimited sensor frames in one POST.
async fn sensor_batch(State(state): State<AppState>, body: axum::body::Bytes) -> ApiResult {
    let messages = decode_batch(&body).map_err(|e| ApiError::new(400, e.to_string()))?;
    let n = messages.len();
    let mut rejected = Vec::new();
    for (i, m) in messages.into_iter().enumerate() {
        if let Err(e) = state.engine.call(Request::Sensor(m)).await {
            rejected.push(json!({ "index": i, "error": e.body["error"] }));
        }
    }
    Ok(Json(json!({ "accepted": n - rejected.len(), "rejected": rejected })))
}

fn sessions_root(config: &EngineConfig) -> PathBuf {
    config.data_dir.join("sessions")
}

async fn sessions(State(state): State<AppState>) -> ApiResult {
    let root = sessions_root(&state.config);
    let mut out = Vec::new();
    if let Ok(dir) = std::fs::read_dir(&root) {
        for entry in dir.flatten() {
            let path = entry.path();
            if path.join("log.ndjson").is_file() {
                out.push(json!({
                    "id": entry.file_name().to_string_lossy(),
                    "active": entry.file_name().to_string_lossy() == state.engine.session(),
                    "has_config": path.join("config.json").is_file(),
                }));
            }
        }
    }
    out.sort_by(|a, b| a["id"].as_str().cmp(&b["id"].as_str()));
    Ok(Json(json!({ "sessions": out })))
}

async fn replay_session(State(state): State<AppState>, body: axum::body::Bytes) -> ApiResult {
    let b: ReplayBody = parse(&body)?;
    if b.session.is_empty() || b.session.contains(['/', '\\']) || b.session.starts_with('.') {
        return Err(ApiError::new(400, "invalid session id"));
    }
    if b.session == state.engine.session() {
        return Err(ApiError::new(409, "cannot replay the active session"));
    }
    let dir = sessions_root(&state.config).join(&b.session);
    if !dir.join("log.ndjson").is_file() {
        return Err(ApiError::new(404, format!("unknown session `{}`", b.session)));
    }
    let handle = state.engine.clone();
    let fallback = (*state.config).clone();
    let session = b.session.clone();
    let report = tokio::task::spawn_blocking(move || replay_dir(&dir, Some(fallback), &mut |done, total| {
        handle.publish(replay_progress_frame(&session, done, total));
    }))
    .await
    .map_err(|e| ApiError::new(500, e.to_string()))??;
    Ok(Json(report))
}

/// Replays a session directory, preferring the config stored beside it.
pub fn replay_dir(
    dir: &Path,
    fallback: Option<EngineConfig>,
    progress: &mut dyn FnMut(usize, usize),
) -> Result<Value, ApiError> {
    let log = read_log(&dir.join("log.ndjson")).map_err(|e| ApiError::new(422, e.to_string()))?;
    let stored = dir.join("config.json");
    let config = if stored.is_file() {
        let text = std::fs::read_to_string(&stored).map_err(|e| ApiError::new(500, e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| ApiError::new(422, format!("{}: {e}", stored.display())))?
    } else {
        fallback.ok_or_else(|| ApiError::new(422, "session has no stored config"))?
    };
    let report = replay(&log, &config, progress).map_err(|e| match e {
        EngineError::Log(stagehand_core::session_log::LogError::ConfigMismatch { .. }) => {
            ApiError::new(409, e.to_string())
        }
        other => ApiError::from(other),
    })?;
    Ok(json!({
        "session": report.session,
        "identical": report.identical,
        "partial": report.partial,
        "original": report.original.len(),
        "reproduced": report.reproduced.len(),
        "prompt_mismatches": report.prompt_mismatches,
    }))
}

// ---------------------------------------------------------------------------
// WebSockets

async fn ws_sensors(ws: WebSocketUpgrade, State(state): State<AppState>) -> Response {
    ws.on_upgrade(move |socket| sensor_socket(socket, state.engine))
}

async fn sensor_socket(mut socket: WebSocket, engine: EngineHandle) {
    while let Some(Ok(msg)) = socket.next().await {
        let bytes = match msg {
            Message::Text(t) => t.as_str().as_bytes().to_vec(),
            Message::Binary(b) => b.to_vec(),
            Message::Close(_) => break,
            _ => continue,
        };
        let error = match decode_sensor_message(&bytes) {
            Ok(m) => engine.call(Request::Sensor(m)).await.err().map(|e| e.body),
            Err(e) => Some(json!({ "error": e.to_string() })),
        };
        if let Some(mut body) = error {
            body["type"] = json!("error");
            if socket.send(Message::Text(body.to_string().into())).await.is_err() {
                break;
            }
        }
    }
}

async fn ws_console(ws: WebSocketUpgrade, State(state): State<AppState>) -> Response {
    ws.on_upgrade(move |socket| console_socket(socket, state))
}

/// Client messages carry the POST payloads plus a `type`.
#[derive(Debug, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum ConsoleMessage {
    Dramaturgy { text: String },
    Clarify { question_id: String, answer: String },
    Command { text: String },
    Annotation {
        exchange: String,
        annotation: Annotation,
        #[serde(default)]
        note: Option<String>,
    },
    Consolidate,
    Panic,
    Resync,
}

impl From<ConsoleMessage> for Request {
    fn from(m: ConsoleMessage) -> Self {
        match m {
            ConsoleMessage::Dramaturgy { text } => Request::Framing(text),
            ConsoleMessage::Clarify { question_id, answer } => Request::Clarify { question_id, answer },
            ConsoleMessage::Command { text } => Request::Command(text),
            ConsoleMessage::Annotation {
                exchange,
                annotation,
                note,
            } => Request::Annotate {
                exchange,
                annotation,
                note,
            },
            ConsoleMessage::Consolidate => Request::Consolidate,
            ConsoleMessage::Panic => Request::Panic,
            ConsoleMessage::Resync => Request::Resync,
        }
    }
}

async fn console_socket(socket: WebSocket, state: AppState) {
    // subscribe before resync so nothing falls between the two
    let mut frames = state.engine.subscribe();
    let (mut tx, mut rx) = socket.split();
    let (out_tx, mut out_rx) = tokio::sync::mpsc::channel::<String>(64);

    let engine = state.engine.clone();
    let resync = out_tx.clone();
    let reader = tokio::spawn(async move {
        while let Some(Ok(msg)) = rx.next().await {
            let text = match msg {
                Message::Text(t) => t.to_string(),
                Message::Close(_) => break,
                _ => continue,
            };
            let reply = match serde_json::from_str::<ConsoleMessage>(&text) {
                Ok(ConsoleMessage::Resync) => match engine.call(Request::Resync).await {
                    Ok(Value::Array(all)) => {
                        for f in all {
                            let _ = resync.send(f.to_string()).await;
                        }
                        continue;
                    }
                    Ok(v) => json!({ "type": "reply", "ok": true, "result": v }),
                    Err(e) => json!({ "type": "reply", "ok": false, "status": e.status, "result": e.body }),
                },
                Ok(m) => match engine.call(m.into()).await {
                    Ok(v) => json!({ "type": "reply", "ok": true, "result": v }),
                    Err(e) => json!({ "type": "reply", "ok": false, "status": e.status, "result": e.body }),
                },
                Err(e) => json!({ "type": "reply", "ok": false, "status": 400, "result": { "error": e.to_string() } }),
            };
            if resync.send(reply.to_string()).await.is_err() {
                break;
            }
        }
    });

    if let Ok(Value::Array(all)) = state.engine.call(Request::Resync).await {
        for f in all {
            if tx.send(Message::Text(f.to_string().into())).await.is_err() {
                reader.abort();
                return;
            }
        }
    }
    loop {
        tokio::select! {
            frame = frames.recv() => match frame {
                Ok(f) => {
                    if tx.send(Message::Text(f.to_string().into())).await.is_err() {
                        break;
                    }
                }
                Err(RecvError::Lagged(n)) => {
                    log::warn!("console subscriber lagged by {n} frames; resyncing");
                    if let Ok(Value::Array(all)) = state.engine.call(Request::Resync).await {
                        for f in all {
                            if tx.send(Message::Text(f.to_string().into())).await.is_err() {
                                break;
                            }
                        }
                    }
                }
                Err(RecvError::Closed) => break,
            },
            out = out_rx.recv() => match out {
                Some(text) => {
                    if tx.send(Message::Text(text.into())).await.is_err() {
                        break;
                    }
                }
                None => break,
            },
        }
    }
    reader.abort();
}
