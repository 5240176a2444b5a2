//! MCP endpoint: JSON-RPC 2.0 over POST `/mcp`, a log/heartbeat stream on
//! GET `/sse`, and GET `/healthz` for liveness. Also the matching client,
//! which the CLI, the daemon, and the tests all share.

pub mod executor;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde_json::{json, Value};
use thiserror::Error;

use crate::events::{now_ms, EventSource, LogEvent, Severity};
use crate::simbus::DeviceBus;
use crate::toolgen::{HandlerPlan, ToolManifest};
use executor::{execute_plan, validate_args};

/// MCP protocol revision this server speaks.
pub const PROTOCOL_VERSION: &str = "2024-11-05";
pub const SERVER_NAME: &str = "octopus";
/// Interval between SSE heartbeat events.
pub const HEARTBEAT_INTERVAL_MS: u64 = 15_000;

pub const PARSE_ERROR: i64 = -32700;
pub const INVALID_REQUEST: i64 = -32600;
pub const METHOD_NOT_FOUND: i64 = -32601;
pub const INVALID_PARAMS: i64 = -32602;
pub const NOT_INITIALIZED: i64 = -32002;

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("bind: {0}")]
    Bind(#[source] std::io::Error),
    #[error("serve: {0}")]
    Manifest(String),
}

// ---------------------------------------------------------------------------
// Server state

pub struct ServerState {
    manifest: RwLock<Arc<ToolManifest>>,
    pub bus: Arc<dyn DeviceBus>,
    sessions: Mutex<BTreeMap<String, bool>>,
    events: tokio::sync::broadcast::Sender<LogEvent>,
    started: std::time::Instant,
    calls: AtomicU64,
}

impl ServerState {
    pub fn new(manifest: ToolManifest, bus: Arc<dyn DeviceBus>) -> Arc<Self> {
        let (events, _) = tokio::sync::broadcast::channel(1024);
        Arc::new(Self {
            manifest: RwLock::new(Arc::new(manifest)),
            bus,
            sessions: Mutex::new(BTreeMap::new()),
            events,
            started: std::time::Instant::now(),
            calls: AtomicU64::new(0),
        })
    }

    pub fn manifest(&self) -> Arc<ToolManifest> {
        Arc::clone(&self.manifest.read().expect("manifest lock"))
    }

    /// Replace the whole served manifest (heal: rebuild-and-redeploy).
    pub fn swap_manifest(&self, manifest: ToolManifest) -> Arc<ToolManifest> {
        let sealed = Arc::new(manifest);
        *self.manifest.write().expect("manifest lock") = Arc::clone(&sealed);
        self.emit(
            LogEvent::new(
                EventSource::Server,
                Severity::Info,
                format!("manifest swapped, hash {}", sealed.manifest_hash),
            )
            .with("manifest_hash", &sealed.manifest_hash),
        );
        sealed
    }

    /// Hot-swap one tool's handler plan (heal: corrected plan) and reseal.
    pub fn swap_plan(
        &self,
        tool_name: &str,
        plan: HandlerPlan,
    ) -> Result<Arc<ToolManifest>, ServeError> {
        let mut next = (*self.manifest()).clone();
        let entry = next
            .tools
            .iter_mut()
            .find(|t| t.tool.name == tool_name)
            .ok_or_else(|| ServeError::Manifest(format!("no such tool: {tool_name}")))?;
        entry.plan = plan;
        next.created_at = crate::events::now_rfc3339();
        Ok(self.swap_manifest(next.seal()))
    }

    pub fn emit(&self, event: LogEvent) {
        // nobody listening is fine
        let _ = self.events.send(event);
    }

    pub fn subscribe(&self) -> tokio::sync::broadcast::Receiver<LogEvent> {
        self.events.subscribe()
    }

    pub fn uptime_s(&self) -> u64 {
        self.started.elapsed().as_secs()
    }

    fn session_initialized(&self, session: &str) -> bool {
        *self
            .sessions
            .lock()
            .expect("session lock")
            .get(session)
            .unwrap_or(&false)
    }

    fn initialize_session(&self, session: &str) {
        self.sessions
            .lock()
            .expect("session lock")
            .insert(session.to_string(), true);
    }
}

// ---------------------------------------------------------------------------
// Handlers

fn rpc_result(id: Value, result: Value) -> Response {
    Json(json!({"jsonrpc": "2.0", "id": id, "result": result})).into_response()
}

fn rpc_error(id: Value, code: i64, message: &str) -> Response {
    Json(json!({
        "jsonrpc": "2.0",
        "id": id,
        "error": {"code": code, "message": message}
    }))
    .into_response()
}

fn session_of(headers: &HeaderMap) -> String {
    headers
        .get("mcp-session-id")
        .and_then(|v| v.to_str().ok())
        .unwrap_or("default")
        .to_string()
}

async fn mcp_handler(
    State(state): State<Arc<ServerState>>,
    headers: HeaderMap,
    body: String,
) -> Response {
    let Ok(request) = serde_json::from_str::<Value>(&body) else {
        return rpc_error(Value::Null, PARSE_ERROR, "parse error");
    };
    if !request.is_object() {
        return rpc_error(Value::Null, INVALID_REQUEST, "expected a request object");
    }
    let id = request.get("id").cloned();
    if request["jsonrpc"] != json!("2.0") {
        return rpc_error(
            id.unwrap_or(Value::Null),
            INVALID_REQUEST,
            "jsonrpc must be \"2.0\"",
        );
    }
    let Some(method) = request["method"].as_str() else {
        return rpc_error(id.unwrap_or(Value::Null), INVALID_REQUEST, "missing method");
    };
    // Requests without an id are notifications: accepted, never answered.
    let Some(id) = id else {
        return StatusCode::ACCEPTED.into_response();
    };

    let session = session_of(&headers);
    match method {
        "initialize" => {
            state.initialize_session(&session);
            state.emit(
                LogEvent::new(
                    EventSource::Server,
                    Severity::Info,
                    format!("session {session} initialized"),
                )
                .with("session", &session),
            );
            rpc_result(
                id,
                json!({
                    "protocolVersion": PROTOCOL_VERSION,
                    "capabilities": {"tools": {"listChanged": true}},
                    "serverInfo": {
                        "name": SERVER_NAME,
                        "version": env!("CARGO_PKG_VERSION")
                    }
                }),
            )
        }
        "ping" => rpc_result(id, json!({})),
        "tools/list" if !state.session_initialized(&session) => {
            rpc_error(id, NOT_INITIALIZED, "server not initialized")
        }
        "tools/call" if !state.session_initialized(&session) => {
            rpc_error(id, NOT_INITIALIZED, "server not initialized")
        }
        "tools/list" => {
            let manifest = state.manifest();
            let tools: Vec<Value> = manifest
                .tools
                .iter()
                .map(|t| {
                    json!({
                        "name": t.tool.name,
                        "description": t.tool.description,
                        "inputSchema": t.tool.input_schema
                    })
                })
                .collect();
            rpc_result(id, json!({"tools": tools}))
        }
        "tools/call" => handle_tool_call(&state, id, &request["params"]).await,
        other => rpc_error(id, METHOD_NOT_FOUND, &format!("method not found: {other}")),
    }
}

async fn handle_tool_call(state: &Arc<ServerState>, id: Value, params: &Value) -> Response {
    let Some(name) = params["name"].as_str() else {
        return rpc_error(id, INVALID_PARAMS, "params.name must be a string");
    };
    let arguments = match &params["arguments"] {
        Value::Null => serde_json::Map::new(),
        Value::Object(map) => map.clone(),
        _ => return rpc_error(id, INVALID_PARAMS, "params.arguments must be an object"),
    };
    let manifest = state.manifest();
    let Some(entry) = manifest.tool(name) else {
        return rpc_error(id, INVALID_PARAMS, &format!("unknown tool: {name}"));
    };
    if let Err(errors) = validate_args(&entry.tool.params, &arguments) {
        return rpc_error(
            id,
            INVALID_PARAMS,
            &format!("invalid arguments: {}", errors.join("; ")),
        );
    }
    let call_id = format!("c{}", state.calls.fetch_add(1, Ordering::SeqCst) + 1);
    match execute_plan(state.bus.as_ref(), entry, &arguments, &call_id).await {
        Ok(outcome) => {
            state.emit(
                LogEvent::new(
                    EventSource::Server,
                    Severity::Info,
                    format!("tool {name} ok (call={call_id})"),
                )
                .with("tool", name)
                .with("call", &call_id)
                .with("device", &entry.tool.device_key),
            );
            let content: Vec<Value> = if outcome.frames.is_empty() {
                vec![json!({
                    "type": "text",
                    "text": outcome.text.unwrap_or_else(|| "ok".to_string())
                })]
            } else {
                outcome
                    .frames
                    .iter()
                    .map(|png| {
                        json!({
                            "type": "image",
                            "data": base64::engine::general_purpose::STANDARD.encode(png),
                            "mimeType": "image/png"
                        })
                    })
                    .collect()
            };
            rpc_result(id, json!({"content": content, "isError": false}))
        }
        Err(e) => {
            state.emit(
                LogEvent::new(
                    EventSource::Server,
                    Severity::Error,
                    format!("tool {name} failed: {e} (call={call_id})"),
                )
                .with("tool", name)
                .with("call", &call_id)
                .with("device", &entry.tool.device_key),
            );
            rpc_result(
                id,
                json!({
                    "content": [{"type": "text", "text": e.to_string()}],
                    "isError": true
                }),
            )
        }
    }
}

async fn healthz_handler(State(state): State<Arc<ServerState>>) -> Response {
    Json(json!({
        "status": "ok",
        "manifest_hash": state.manifest().manifest_hash,
        "uptime_s": state.uptime_s()
    }))
    .into_response()
}

fn heartbeat_event() -> Event {
    Event::default()
        .event("heartbeat")
        .data(json!({"at": now_ms()}).to_string())
}

async fn sse_handler(State(state): State<Arc<ServerState>>) -> Response {
    use futures::StreamExt;
    let rx = state.subscribe();
    let period = std::time::Duration::from_millis(HEARTBEAT_INTERVAL_MS);
    // One heartbeat goes out synchronously on connect so consumers can tell a
    // live-but-quiet stream from a dead connection; the interval covers the
    // rest.
    let hello =
        futures::stream::once(async { Ok::<Event, std::convert::Infallible>(heartbeat_event()) });
    let mut heartbeat = tokio::time::interval_at(tokio::time::Instant::now() + period, period);
    heartbeat.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    let live = futures::stream::unfold((rx, heartbeat), |(mut rx, mut heartbeat)| async move {
        let event = tokio::select! {
            _ = heartbeat.tick() => heartbeat_event(),
            received = rx.recv() => match received {
                Ok(log) => Event::default()
                    .event("log")
                    .data(serde_json::to_string(&log).expect("log events serialize")),
                Err(tokio::sync::broadcast::error::RecvError::Lagged(n)) => Event::default()
                    .event("log")
                    .data(
                        serde_json::to_string(&LogEvent::new(
                            EventSource::Server,
                            Severity::Warn,
                            format!("sse consumer lagged, dropped {n} events"),
                        ))
                        .expect("log events serialize"),
                    ),
                Err(tokio::sync::broadcast::error::RecvError::Closed) => return None,
            },
        };
        Some((
            Ok::<Event, std::convert::Infallible>(event),
            (rx, heartbeat),
        ))
    });
    Sse::new(hello.chain(live)).into_response()
}

pub fn router(state: Arc<ServerState>) -> Router {
    Router::new()
        .route("/mcp", post(mcp_handler))
        .route("/sse", get(sse_handler))
        .route("/healthz", get(healthz_handler))
        .with_state(state)
}

// ---------------------------------------------------------------------------
// Server lifecycle

pub struct McpServer {
    pub addr: std::net::SocketAddr,
    pub state: Arc<ServerState>,
    handle: tokio::task::JoinHandle<()>,
}

impl McpServer {
    /// Bind and serve on 127.0.0.1; `port` 0 picks an ephemeral port.
    pub async fn start(
        manifest: ToolManifest,
        bus: Arc<dyn DeviceBus>,
        port: u16,
    ) -> Result<Self, ServeError> {
        Self::start_with_state(ServerState::new(manifest, bus), port).await
    }

    pub async fn start_with_state(state: Arc<ServerState>, port: u16) -> Result<Self, ServeError> {
        let listener = tokio::net::TcpListener::bind(("127.0.0.1", port))
            .await
            .map_err(ServeError::Bind)?;
        let addr = listener.local_addr().map_err(ServeError::Bind)?;
        let app = router(Arc::clone(&state));
        let handle = tokio::spawn(async move {
            // serve() only returns on listener failure; abort() stops it
            let _ = axum::serve(listener, app).await;
        });
        state.emit(LogEvent::new(
            EventSource::Server,
            Severity::Info,
            format!("listening on {addr}"),
        ));
        Ok(Self {
            addr,
            state,
            handle,
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(&self) {
        self.handle.abort();
    }
}

impl Drop for McpServer {
    fn drop(&mut self) {
        self.handle.abort();
    }
}

// ---------------------------------------------------------------------------
// Client

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("rpc error {code}: {message}")]
    Rpc { code: i64, message: String },
    #[error("unexpected response shape: {0}")]
    Shape(String),
}

/// Result of one `tools/call`.
#[derive(Debug, Clone)]
pub struct CallResult {
    pub is_error: bool,
    pub content: Vec<Value>,
}

impl CallResult {
    /// First text block, if any.
    pub fn text(&self) -> Option<String> {
        self.content.iter().find_map(|c| {
            (c["type"] == json!("text")).then(|| c["text"].as_str().unwrap_or_default().to_string())
        })
    }

    /// All image blocks, base64-decoded.
    pub fn images(&self) -> Vec<Vec<u8>> {
        self.content
            .iter()
            .filter(|c| c["type"] == json!("image"))
            .filter_map(|c| {
                base64::engine::general_purpose::STANDARD
                    .decode(c["data"].as_str().unwrap_or_default())
                    .ok()
            })
            .collect()
    }
}

pub struct McpClient {
    http: reqwest::Client,
    base: String,
    session: String,
    next_id: AtomicU64,
}

impl McpClient {
    pub fn new(base_url: &str) -> Self {
        Self {
            http: reqwest::Client::new(),
            base: base_url.trim_end_matches('/').to_string(),
            session: uuid::Uuid::new_v4().to_string(),
            next_id: AtomicU64::new(1),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn post(&self, body: Value) -> Result<Value, ClientError> {
        let resp = self
            .http
            .post(format!("{}/mcp", self.base))
            .header("Mcp-Session-Id", &self.session)
            .json(&body)
            .send()
            .await
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        if resp.status() == reqwest::StatusCode::ACCEPTED {
            return Ok(Value::Null);
        }
        resp.json()
            .await
            .map_err(|e| ClientError::Transport(e.to_string()))
    }

    async fn rpc(&self, method: &str, params: Value) -> Result<Value, ClientError> {
        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        let mut body = json!({"jsonrpc": "2.0", "id": id, "method": method});
        if !params.is_null() {
            body["params"] = params;
        }
        let response = self.post(body).await?;
        if let Some(error) = response.get("error") {
            return Err(ClientError::Rpc {
                code: error["code"].as_i64().unwrap_or_default(),
                message: error["message"].as_str().unwrap_or_default().to_string(),
            });
        }
        response
            .get("result")
            .cloned()
            .ok_or_else(|| ClientError::Shape("missing result".to_string()))
    }

    /// Full handshake: `initialize` plus the initialized notification.
    pub async fn initialize(&self) -> Result<Value, ClientError> {
        let result = self.rpc("initialize", json!({})).await?;
        self.post(json!({"jsonrpc": "2.0", "method": "notifications/initialized"}))
            .await?;
        Ok(result)
    }

    pub async fn tools_list(&self) -> Result<Vec<Value>, ClientError> {
        let result = self.rpc("tools/list", Value::Null).await?;
        result["tools"]
            .as_array()
            .cloned()
            .ok_or_else(|| ClientError::Shape("missing tools array".to_string()))
    }

    pub async fn tools_call(
        &self,
        name: &str,
        arguments: Value,
    ) -> Result<CallResult, ClientError> {
        let result = self
            .rpc("tools/call", json!({"name": name, "arguments": arguments}))
            .await?;
        Ok(CallResult {
            is_error: result["isError"].as_bool().unwrap_or(false),
            content: result["content"].as_array().cloned().unwrap_or_default(),
        })
    }

    pub async fn healthz(&self) -> Result<Value, ClientError> {
        self.http
            .get(format!("{}/healthz", self.base))
            .send()
            .await
            .map_err(|e| ClientError::Transport(e.to_string()))?
            .json()
            .await
            .map_err(|e| ClientError::Transport(e.to_string()))
    }
}
