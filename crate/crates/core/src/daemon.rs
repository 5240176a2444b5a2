//! The living backend: watch the endpoint's own event stream, diagnose
//! failures against a small rulebook (agent as tie-breaker), heal with one
//! playbook per failure class, and keep a two-keyframe visual memory fresh.

use std::collections::{BTreeMap, VecDeque};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agentport::{
    validate_caption_v1, validate_classify_v1, AgentError, AgentPort, Attachment, Purpose,
};
use crate::deploy::{manifest_requirements, DeployError, Installer, StateStore, PERCEPTS_FILE};
use crate::events::{EventSource, LogEvent, Severity};
use crate::identify::{identify_inventory, DeviceDatabase, IdentifyConfig, IdentifyError};
use crate::mcpserve::{ClientError, McpClient, ServerState};
use crate::platform::{merge_inventory, parse_usb_listing, Enumerator, PlatformDescriptor};
use crate::simbus::DeviceBus;
use crate::specs::{context, render_prompt, SpecError, SpecSet, Stage};
use crate::toolgen::{build_manifest, draft_plan, PlanStep, ToolgenError};

pub const DEFAULT_QUIET_WINDOW_MS: u64 = 5_000;
pub const DEFAULT_PERCEIVE_INTERVAL_MS: u64 = 30_000;
pub const DEFAULT_INTEGRITY_INTERVAL_MS: u64 = 2_000;
/// Timeouts or not-founds on one device before it counts as lost.
pub const DEFAULT_STRIKE_THRESHOLD: u32 = 3;
pub const MAX_HEAL_ATTEMPTS: u32 = 3;
pub const BACKOFF_BASE_MS: u64 = 500;
pub const BACKOFF_CAP_MS: u64 = 8_000;
pub const WATCH_BUFFER_CAP: usize = 1024;
/// The entire visual memory: this many newest frames, plus one caption.
pub const MAX_KEYFRAMES: usize = 2;
pub const MAX_STORED_PERCEPTS: usize = 64;

#[derive(Debug, Error)]
pub enum DaemonError {
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Deploy(#[from] DeployError),
    #[error(transparent)]
    Toolgen(#[from] ToolgenError),
    #[error(transparent)]
    Identify(#[from] IdentifyError),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("no tool in the manifest captures frames")]
    NoPerceptTool,
    #[error("percept capture failed: {0}")]
    Percept(String),
    #[error("invalid agent response: {}", .0.join("; "))]
    Validation(Vec<String>),
    #[error("heal: {0}")]
    Heal(String),
}

// ---------------------------------------------------------------------------
// SSE consumption

/// One server-sent event as it appears on the wire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SseFrame {
    pub event: String,
    pub data: String,
}

/// Incremental SSE parser; chunks may split frames anywhere.
#[derive(Debug, Default)]
pub struct SseParser {
    buf: String,
}

impl SseParser {
    pub fn push(&mut self, chunk: &str) -> Vec<SseFrame> {
        self.buf.push_str(chunk);
        let mut frames = Vec::new();
        while let Some(pos) = self.buf.find("\n\n") {
            let block: String = self.buf.drain(..pos + 2).collect();
            let mut event = String::from("message");
            let mut data_lines = Vec::new();
            for line in block.lines() {
                if let Some(rest) = line.strip_prefix("event:") {
                    event = rest.trim_start().to_string();
                } else if let Some(rest) = line.strip_prefix("data:") {
                    data_lines.push(rest.strip_prefix(' ').unwrap_or(rest).to_string());
                }
            }
            if !data_lines.is_empty() {
                frames.push(SseFrame {
                    event,
                    data: data_lines.join("\n"),
                });
            }
        }
        frames
    }
}

/// Exponential reconnect backoff: base, doubled per attempt, capped.
pub fn backoff_delay_ms(attempt: u32, base_ms: u64, cap_ms: u64) -> u64 {
    base_ms
        .checked_shl(attempt.min(16))
        .unwrap_or(u64::MAX)
        .min(cap_ms)
}

/// Bounded event history. When full, the oldest events fall off and the
/// drop counter records how many were lost.
#[derive(Debug)]
pub struct WatchBuffer {
    events: VecDeque<LogEvent>,
    cap: usize,
    dropped: u64,
}

impl WatchBuffer {
    pub fn new(cap: usize) -> Self {
        Self {
            events: VecDeque::with_capacity(cap.min(64)),
            cap,
            dropped: 0,
        }
    }

    pub fn push(&mut self, event: LogEvent) {
        if self.events.len() == self.cap {
            self.events.pop_front();
            self.dropped += 1;
        }
        self.events.push_back(event);
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn recent(&self, n: usize) -> Vec<LogEvent> {
        self.events.iter().rev().take(n).rev().cloned().collect()
    }
}

// ---------------------------------------------------------------------------
// Failure classification

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureClass {
    MissingDependency,
    DeviceLost,
    ManifestCorrupt,
    HandlerError,
    Unknown,
}

impl FailureClass {
    pub fn name(self) -> &'static str {
        match self {
            FailureClass::MissingDependency => "missing_dependency",
            FailureClass::DeviceLost => "device_lost",
            FailureClass::ManifestCorrupt => "manifest_corrupt",
            FailureClass::HandlerError => "handler_error",
            FailureClass::Unknown => "unknown",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "missing_dependency" => Some(FailureClass::MissingDependency),
            "device_lost" => Some(FailureClass::DeviceLost),
            "manifest_corrupt" => Some(FailureClass::ManifestCorrupt),
            "handler_error" => Some(FailureClass::HandlerError),
            "unknown" => Some(FailureClass::Unknown),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub class: FailureClass,
    /// Dependency name, device key, or tool name, depending on the class.
    pub subject: Option<String>,
    pub summary: String,
}

fn dependency_of(event: &LogEvent) -> Option<String> {
    let rest = event.text.split("missing dependency: ").nth(1)?;
    Some(rest.split_whitespace().next().unwrap_or(rest).to_string())
}

fn is_manifest_corrupt(event: &LogEvent) -> bool {
    event.text.contains("manifest hash check failed") || event.text.contains("manifest corrupt")
}

/// Device key implicated by a timeout / not-found event, if any.
fn lost_device_of(event: &LogEvent) -> Option<String> {
    let timeoutish =
        event.text.contains("timeout after") || event.text.contains("device not found:");
    if !timeoutish {
        return None;
    }
    if let Some(device) = event.structured.get("device") {
        return Some(device.clone());
    }
    if let Some(rest) = event.text.split("device not found: ").nth(1) {
        return Some(rest.split_whitespace().next().unwrap_or(rest).to_string());
    }
    event
        .text
        .split(" on ")
        .nth(1)
        .map(|rest| rest.split_whitespace().next().unwrap_or(rest).to_string())
}

fn handler_tool_of(event: &LogEvent) -> Option<String> {
    let handlerish = event.text.contains("expect mismatch")
        || event.text.contains("postcondition failed")
        || event.text.contains("plan error");
    if !handlerish {
        return None;
    }
    event.structured.get("tool").cloned()
}

fn window_summary(window: &[LogEvent]) -> String {
    window
        .iter()
        .rev()
        .take(5)
        .rev()
        .map(|e| e.text.clone())
        .collect::<Vec<_>>()
        .join(" | ")
}

/// Rule-based diagnosis of an error window. Rules are ordered: a vanished
/// dependency explains more than the timeouts it causes, a corrupt manifest
/// more than the handlers it breaks, a lost device more than one bad plan.
pub fn classify_window(window: &[LogEvent], strike_threshold: u32) -> Diagnosis {
    let summary = window_summary(window);
    if let Some(dep) = window.iter().rev().find_map(dependency_of) {
        return Diagnosis {
            class: FailureClass::MissingDependency,
            subject: Some(dep),
            summary,
        };
    }
    if window.iter().any(is_manifest_corrupt) {
        return Diagnosis {
            class: FailureClass::ManifestCorrupt,
            subject: None,
            summary,
        };
    }
    let mut strikes: BTreeMap<String, u32> = BTreeMap::new();
    for event in window {
        if let Some(device) = lost_device_of(event) {
            *strikes.entry(device).or_default() += 1;
        }
    }
    if let Some((device, _)) = strikes
        .iter()
        .filter(|(_, n)| **n >= strike_threshold)
        .max_by_key(|(_, n)| **n)
    {
        return Diagnosis {
            class: FailureClass::DeviceLost,
            subject: Some(device.clone()),
            summary,
        };
    }
    if let Some(tool) = window.iter().rev().find_map(handler_tool_of) {
        return Diagnosis {
            class: FailureClass::HandlerError,
            subject: Some(tool),
            summary,
        };
    }
    Diagnosis {
        class: FailureClass::Unknown,
        subject: None,
        summary,
    }
}

/// Rules first; only an `unknown` verdict is escalated to the agent with the
/// watch-stage prompt, and the agent's answer is schema-checked before use.
pub async fn classify_with_agent(
    window: &[LogEvent],
    strike_threshold: u32,
    agent: &dyn AgentPort,
    specs: &SpecSet,
) -> Result<Diagnosis, DaemonError> {
    let ruled = classify_window(window, strike_threshold);
    if ruled.class != FailureClass::Unknown || window.is_empty() {
        return Ok(ruled);
    }
    let excerpt = window
        .iter()
        .rev()
        .take(20)
        .rev()
        .map(|e| format!("[{:?}] {}", e.severity, e.text))
        .collect::<Vec<_>>()
        .join("\n");
    let spec = specs.get(Stage::Watch);
    let prompt = render_prompt(spec, &context(&[("log_excerpt", &excerpt)]))?.text;
    let response = agent.complete(Purpose::Classify, &prompt, &[]).await?;
    let errors = validate_classify_v1(&response);
    if !errors.is_empty() {
        return Err(DaemonError::Validation(errors));
    }
    let class = FailureClass::from_name(response["class"].as_str().unwrap_or("unknown"))
        .unwrap_or(FailureClass::Unknown);
    Ok(Diagnosis {
        class,
        subject: response["target"].as_str().map(str::to_string),
        summary: ruled.summary,
    })
}

// ---------------------------------------------------------------------------
// Percepts

/// What the daemon remembers seeing: one caption over at most two frames.
/// Anything older is deliberately forgotten.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerceptSummary {
    pub at: String,
    pub caption: String,
    /// Digests of the retained keyframes, oldest first.
    pub keyframes: Vec<String>,
    /// Digests the caption claims to be drawn from.
    pub based_on: Vec<String>,
}

// ---------------------------------------------------------------------------
// The daemon

#[derive(Debug, Clone)]
pub struct DaemonConfig {
    pub quiet_window_ms: u64,
    pub perceive_interval_ms: u64,
    pub integrity_interval_ms: u64,
    pub strike_threshold: u32,
    pub max_heal_attempts: u32,
    pub backoff_base_ms: u64,
    pub backoff_cap_ms: u64,
    /// Pause between re-probe attempts while waiting for a replug.
    pub replug_wait_ms: u64,
}

impl Default for DaemonConfig {
    fn default() -> Self {
        Self {
            quiet_window_ms: DEFAULT_QUIET_WINDOW_MS,
            perceive_interval_ms: DEFAULT_PERCEIVE_INTERVAL_MS,
            integrity_interval_ms: DEFAULT_INTEGRITY_INTERVAL_MS,
            strike_threshold: DEFAULT_STRIKE_THRESHOLD,
            max_heal_attempts: MAX_HEAL_ATTEMPTS,
            backoff_base_ms: BACKOFF_BASE_MS,
            backoff_cap_ms: BACKOFF_CAP_MS,
            replug_wait_ms: 1_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DaemonMode {
    Watching,
    Healing,
    Degraded,
}

/// One completed heal attempt series, kept for status reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealRecord {
    pub class: FailureClass,
    pub subject: Option<String>,
    pub attempts: u32,
    pub healed: bool,
    pub action: String,
}

/// Everything the daemon needs to operate on a deployed endpoint.
pub struct DaemonSeed {
    pub state: Arc<ServerState>,
    pub endpoint: String,
    pub bus: Arc<dyn DeviceBus>,
    pub agent: Arc<dyn AgentPort>,
    pub specs: SpecSet,
    pub db: DeviceDatabase,
    pub identify_config: IdentifyConfig,
    pub platform: PlatformDescriptor,
    pub store: Option<StateStore>,
    pub installer: Option<Arc<dyn Installer>>,
    pub config: DaemonConfig,
}

pub struct Daemon {
    config: DaemonConfig,
    state: Arc<ServerState>,
    client: McpClient,
    bus: Arc<dyn DeviceBus>,
    agent: Arc<dyn AgentPort>,
    specs: SpecSet,
    db: DeviceDatabase,
    identify_config: IdentifyConfig,
    platform: PlatformDescriptor,
    store: Option<StateStore>,
    installer: Option<Arc<dyn Installer>>,
    mode: Mutex<DaemonMode>,
    buffer: Mutex<WatchBuffer>,
    keyframes: Mutex<VecDeque<(String, Vec<u8>)>>,
    heal_log: Mutex<Vec<HealRecord>>,
    client_ready: tokio::sync::OnceCell<()>,
}

impl Daemon {
    pub fn new(seed: DaemonSeed) -> Arc<Self> {
        Arc::new(Self {
            client: McpClient::new(&seed.endpoint),
            config: seed.config,
            state: seed.state,
            bus: seed.bus,
            agent: seed.agent,
            specs: seed.specs,
            db: seed.db,
            identify_config: seed.identify_config,
            platform: seed.platform,
            store: seed.store,
            installer: seed.installer,
            mode: Mutex::new(DaemonMode::Watching),
            buffer: Mutex::new(WatchBuffer::new(WATCH_BUFFER_CAP)),
            keyframes: Mutex::new(VecDeque::new()),
            heal_log: Mutex::new(Vec::new()),
            client_ready: tokio::sync::OnceCell::new(),
        })
    }

    pub fn mode(&self) -> DaemonMode {
        *self.mode.lock().expect("mode lock")
    }

    fn set_mode(&self, mode: DaemonMode) {
        *self.mode.lock().expect("mode lock") = mode;
    }

    pub fn heal_log(&self) -> Vec<HealRecord> {
        self.heal_log.lock().expect("heal log lock").clone()
    }

    pub fn buffered(&self, n: usize) -> Vec<LogEvent> {
        self.buffer.lock().expect("buffer lock").recent(n)
    }

    pub fn dropped_events(&self) -> u64 {
        self.buffer.lock().expect("buffer lock").dropped()
    }

    pub fn keyframe_digests(&self) -> Vec<String> {
        self.keyframes
            .lock()
            .expect("keyframe lock")
            .iter()
            .map(|(digest, _)| digest.clone())
            .collect()
    }

    fn emit(&self, severity: Severity, text: String) {
        self.state
            .emit(LogEvent::new(EventSource::Daemon, severity, text));
    }

    async fn ensure_session(&self) -> Result<(), DaemonError> {
        self.client_ready
            .get_or_try_init(|| async { self.client.initialize().await.map(|_| ()) })
            .await
            .map(|_| ())
            .map_err(DaemonError::Client)
    }

    // -- perceive ----------------------------------------------------------

    /// First manifest tool whose plan captures frames.
    pub fn percept_tool(&self) -> Option<String> {
        let manifest = self.state.manifest();
        manifest
            .tools
            .iter()
            .find(|entry| {
                entry
                    .plan
                    .steps
                    .iter()
                    .any(|s| matches!(s, PlanStep::CaptureFrame { .. }))
            })
            .map(|entry| entry.tool.name.clone())
    }

    /// One perceive cycle: capture through the public endpoint (the daemon
    /// is a client of its own server, never of the bus directly), retain at
    /// most [`MAX_KEYFRAMES`] frames, caption them, persist the summary.
    pub async fn perceive_once(&self) -> Result<PerceptSummary, DaemonError> {
        let tool = self.percept_tool().ok_or(DaemonError::NoPerceptTool)?;
        self.ensure_session().await?;
        let result = self.client.tools_call(&tool, serde_json::json!({})).await?;
        if result.is_error {
            return Err(DaemonError::Percept(
                result.text().unwrap_or_else(|| "no detail".to_string()),
            ));
        }
        let frames = result.images();
        if frames.is_empty() {
            return Err(DaemonError::Percept("no frame in tool result".to_string()));
        }

        let digests: Vec<String>;
        let attachments: Vec<Attachment>;
        {
            let mut keyframes = self.keyframes.lock().expect("keyframe lock");
            for frame in frames {
                let digest = crate::hashing::sha256_hex(&frame);
                keyframes.push_back((digest, frame));
                while keyframes.len() > MAX_KEYFRAMES {
                    keyframes.pop_front();
                }
            }
            digests = keyframes.iter().map(|(d, _)| d.clone()).collect();
            attachments = keyframes
                .iter()
                .map(|(_, png)| Attachment::png(png.clone()))
                .collect();
        }

        let spec = self.specs.get(Stage::Perceive);
        let prompt = render_prompt(
            spec,
            &context(&[
                ("keyframe_count", &digests.len().to_string()),
                ("keyframe_digests", &digests.join(", ")),
                ("based_on_tool", &tool),
            ]),
        )?
        .text;
        let response = self
            .agent
            .complete(Purpose::Caption, &prompt, &attachments)
            .await?;
        let mut errors = validate_caption_v1(&response);
        let based_on: Vec<String> = response["based_on"]
            .as_array()
            .map(|a| {
                a.iter()
                    .filter_map(|v| v.as_str().map(str::to_string))
                    .collect()
            })
            .unwrap_or_default();
        for claimed in &based_on {
            if !digests.contains(claimed) {
                errors.push(format!("based_on: unknown keyframe digest {claimed}"));
            }
        }
        if !errors.is_empty() {
            return Err(DaemonError::Validation(errors));
        }

        let summary = PerceptSummary {
            at: crate::events::now_rfc3339(),
            caption: response["caption"].as_str().unwrap_or_default().to_string(),
            keyframes: digests,
            based_on,
        };
        if let Some(store) = &self.store {
            let mut percepts: Vec<PerceptSummary> =
                store.load_json(PERCEPTS_FILE).unwrap_or_default();
            percepts.push(summary.clone());
            if percepts.len() > MAX_STORED_PERCEPTS {
                let excess = percepts.len() - MAX_STORED_PERCEPTS;
                percepts.drain(..excess);
            }
            store.save_json(PERCEPTS_FILE, &percepts)?;
        }
        self.emit(Severity::Info, format!("percept: {}", summary.caption));
        Ok(summary)
    }

    // -- watch -------------------------------------------------------------

    /// The served manifest must still match its own digest; emit a corrupt
    /// marker event when it does not, and let the heal path pick it up.
    pub fn integrity_check(&self) -> bool {
        let manifest = self.state.manifest();
        if manifest.verify_hash() {
            return true;
        }
        self.state.emit(
            LogEvent::new(
                EventSource::Daemon,
                Severity::Error,
                "manifest corrupt: served manifest fails its hash check".to_string(),
            )
            .with("manifest_hash", &manifest.manifest_hash),
        );
        false
    }

    pub fn record_event(&self, event: LogEvent) {
        self.buffer.lock().expect("buffer lock").push(event);
    }

    // -- heal --------------------------------------------------------------

    /// Diagnose an error window and run the matching playbook, up to
    /// `max_heal_attempts` times. Returns the record of what happened;
    /// `None` when the window yielded nothing actionable.
    pub async fn diagnose_and_heal(&self, window: &[LogEvent]) -> Option<HealRecord> {
        let diagnosis = match classify_with_agent(
            window,
            self.config.strike_threshold,
            self.agent.as_ref(),
            &self.specs,
        )
        .await
        {
            Ok(d) => d,
            Err(e) => {
                self.emit(Severity::Warn, format!("diagnosis failed: {e}"));
                return None;
            }
        };
        if diagnosis.class == FailureClass::Unknown {
            self.emit(
                Severity::Info,
                format!(
                    "watch: {} error event(s), no actionable diagnosis",
                    window.len()
                ),
            );
            return None;
        }
        self.set_mode(DaemonMode::Healing);
        self.emit(
            Severity::Warn,
            format!(
                "diagnosed {}{}; healing",
                diagnosis.class.name(),
                diagnosis
                    .subject
                    .as_deref()
                    .map(|s| format!(" ({s})"))
                    .unwrap_or_default()
            ),
        );

        let mut record = HealRecord {
            class: diagnosis.class,
            subject: diagnosis.subject.clone(),
            attempts: 0,
            healed: false,
            action: String::new(),
        };
        for attempt in 1..=self.config.max_heal_attempts {
            record.attempts = attempt;
            match self.heal_once(&diagnosis).await {
                Ok(action) => {
                    record.healed = true;
                    record.action = action;
                    break;
                }
                Err(e) => {
                    record.action = e.to_string();
                    self.emit(
                        Severity::Warn,
                        format!(
                            "heal attempt {attempt}/{} failed: {e}",
                            self.config.max_heal_attempts
                        ),
                    );
                    if attempt < self.config.max_heal_attempts {
                        let delay = match diagnosis.class {
                            FailureClass::DeviceLost => self.config.replug_wait_ms,
                            _ => backoff_delay_ms(
                                attempt - 1,
                                self.config.backoff_base_ms,
                                self.config.backoff_cap_ms,
                            ),
                        };
                        tokio::time::sleep(std::time::Duration::from_millis(delay)).await;
                    }
                }
            }
        }
        if record.healed {
            self.set_mode(DaemonMode::Watching);
            self.emit(
                Severity::Info,
                format!(
                    "healed {} after {} attempt(s): {}",
                    record.class.name(),
                    record.attempts,
                    record.action
                ),
            );
        } else {
            self.set_mode(DaemonMode::Degraded);
            self.emit(
                Severity::Warn,
                format!(
                    "giving up on {} after {} attempt(s); running degraded",
                    record.class.name(),
                    record.attempts
                ),
            );
        }
        self.heal_log
            .lock()
            .expect("heal log lock")
            .push(record.clone());
        Some(record)
    }

    async fn heal_once(&self, diagnosis: &Diagnosis) -> Result<String, DaemonError> {
        match diagnosis.class {
            FailureClass::MissingDependency => self.heal_missing_dependency(diagnosis).await,
            FailureClass::DeviceLost => self.heal_device_lost(diagnosis).await,
            FailureClass::ManifestCorrupt => self.heal_manifest_corrupt().await,
            FailureClass::HandlerError => self.heal_handler_error(diagnosis).await,
            FailureClass::Unknown => Err(DaemonError::Heal(
                "no playbook for class unknown".to_string(),
            )),
        }
    }

    /// Playbook: reinstall the dependency, then confirm the host sees it.
    async fn heal_missing_dependency(&self, diagnosis: &Diagnosis) -> Result<String, DaemonError> {
        let name = diagnosis
            .subject
            .clone()
            .ok_or_else(|| DaemonError::Heal("no dependency named".to_string()))?;
        let installer = self
            .installer
            .as_ref()
            .ok_or_else(|| DaemonError::Heal("no installer configured".to_string()))?;
        let requirement = manifest_requirements(&self.state.manifest())
            .into_iter()
            .find(|r| r.name == name)
            .ok_or_else(|| {
                DaemonError::Heal(format!("{name} is not required by any served tool"))
            })?;
        installer
            .install(&requirement)
            .await
            .map_err(|reason| DaemonError::Heal(format!("install {name}: {reason}")))?;
        if !self.bus.has_dependency(&name) {
            return Err(DaemonError::Heal(format!(
                "{name} still unavailable after reinstall"
            )));
        }
        Ok(format!("reinstalled dependency {name}"))
    }

    /// Playbook: re-probe, and once the device answers again rebuild the
    /// manifest for the fresh inventory and hot-swap it into the server.
    async fn heal_device_lost(&self, diagnosis: &Diagnosis) -> Result<String, DaemonError> {
        let key = diagnosis
            .subject
            .clone()
            .ok_or_else(|| DaemonError::Heal("no device named".to_string()))?;
        let (records, _) = parse_usb_listing(&self.bus.snapshot_listing());
        let inventory = merge_inventory(&self.platform, vec![(Enumerator::SimulatedBus, records)]);
        if !inventory.devices.iter().any(|d| d.stable_key == key) {
            return Err(DaemonError::Heal(format!(
                "{key} still absent after re-probe"
            )));
        }
        let (identification, _) = identify_inventory(
            &inventory,
            &self.db,
            self.agent.as_ref(),
            &self.specs,
            &self.identify_config,
        )
        .await?;
        let (manifest, _) = build_manifest(
            &identification,
            &inventory.inventory_hash,
            self.agent.as_ref(),
            &self.specs,
        )
        .await?;
        let hash = manifest.manifest_hash.clone();
        let tool_count = manifest.tools.len();
        self.state.swap_manifest(manifest);
        if let Some(store) = &self.store {
            store.save_inventory(&inventory)?;
            store.save_identification(&identification)?;
            store.save_manifest(&self.state.manifest())?;
        }
        self.verify_served_hash(&hash).await?;
        Ok(format!(
            "{key} reappeared; rebuilt and redeployed {tool_count} tools ({hash})"
        ))
    }

    /// Playbook: rebuild from the persisted inventory and identification —
    /// no re-probe, no re-identify, just regenerate and swap.
    async fn heal_manifest_corrupt(&self) -> Result<String, DaemonError> {
        let store = self
            .store
            .as_ref()
            .ok_or_else(|| DaemonError::Heal("no state store configured".to_string()))?;
        let inventory = store.load_inventory()?;
        let identification = store.load_identification()?;
        let (manifest, _) = build_manifest(
            &identification,
            &inventory.inventory_hash,
            self.agent.as_ref(),
            &self.specs,
        )
        .await?;
        let hash = manifest.manifest_hash.clone();
        self.state.swap_manifest(manifest);
        store.save_manifest(&self.state.manifest())?;
        self.verify_served_hash(&hash).await?;
        Ok(format!("rebuilt manifest from persisted state ({hash})"))
    }

    /// Playbook: re-prompt the agent for a corrected plan, carrying the
    /// failure context, and hot-swap it under the same tool name.
    async fn heal_handler_error(&self, diagnosis: &Diagnosis) -> Result<String, DaemonError> {
        let tool_name = diagnosis
            .subject
            .clone()
            .ok_or_else(|| DaemonError::Heal("no tool named".to_string()))?;
        let manifest = self.state.manifest();
        let entry = manifest.tool(&tool_name).ok_or_else(|| {
            DaemonError::Heal(format!("{tool_name} is not in the served manifest"))
        })?;
        let drafted = draft_plan(
            self.agent.as_ref(),
            &self.specs,
            Purpose::HealPlan,
            &tool_name,
            &entry.tool.device_key,
            &entry.tool.description,
            &entry.tool.params,
            Some(&diagnosis.summary),
        )
        .await?;
        let plan = drafted.map_err(DaemonError::Validation)?;
        self.state
            .swap_plan(&tool_name, plan)
            .map_err(|e| DaemonError::Heal(e.to_string()))?;
        if let Some(store) = &self.store {
            store.save_manifest(&self.state.manifest())?;
        }
        // Tools without parameters can be proven healed on the spot.
        if entry.tool.params.is_empty() {
            self.ensure_session().await?;
            let result = self
                .client
                .tools_call(&tool_name, serde_json::json!({}))
                .await?;
            if result.is_error {
                return Err(DaemonError::Heal(format!(
                    "{tool_name} still failing after plan swap: {}",
                    result.text().unwrap_or_default()
                )));
            }
        }
        Ok(format!("re-drafted handler plan for {tool_name}"))
    }

    async fn verify_served_hash(&self, expected: &str) -> Result<(), DaemonError> {
        let health = self.client.healthz().await?;
        let served = health["manifest_hash"].as_str().unwrap_or_default();
        if served != expected {
            return Err(DaemonError::Heal(format!(
                "endpoint serves {served}, expected {expected}"
            )));
        }
        Ok(())
    }

    // -- the loop ----------------------------------------------------------

    /// Run watch + heal + perceive until `shutdown` flips to true.
    pub async fn run(self: Arc<Self>, mut shutdown: tokio::sync::watch::Receiver<bool>) {
        let (error_tx, mut error_rx) = tokio::sync::mpsc::unbounded_channel::<LogEvent>();
        let watcher = tokio::spawn(Self::watch_sse(
            Arc::clone(&self),
            error_tx,
            shutdown.clone(),
        ));

        let mut perceive = tokio::time::interval(std::time::Duration::from_millis(
            self.config.perceive_interval_ms,
        ));
        perceive.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        let mut integrity = tokio::time::interval(std::time::Duration::from_millis(
            self.config.integrity_interval_ms,
        ));
        integrity.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);

        loop {
            tokio::select! {
                _ = shutdown.changed() => {
                    if *shutdown.borrow() {
                        break;
                    }
                }
                received = error_rx.recv() => {
                    let Some(first) = received else { break };
                    let mut window = vec![first];
                    // Collect the whole burst: the window closes only after
                    // a full quiet interval with no further errors.
                    while let Ok(Some(event)) = tokio::time::timeout(
                        std::time::Duration::from_millis(self.config.quiet_window_ms),
                        error_rx.recv(),
                    )
                    .await
                    {
                        window.push(event);
                    }
                    self.diagnose_and_heal(&window).await;
                }
                _ = perceive.tick() => {
                    if self.mode() == DaemonMode::Watching {
                        if let Err(e) = self.perceive_once().await {
                            self.emit(Severity::Warn, format!("perceive failed: {e}"));
                        }
                    }
                }
                _ = integrity.tick() => {
                    if self.mode() == DaemonMode::Watching {
                        self.integrity_check();
                    }
                }
            }
        }
        watcher.abort();
    }

    /// Consume the endpoint's SSE stream, buffering every log event and
    /// forwarding error-severity ones to the heal loop. Reconnects with
    /// exponential backoff; the stream owes us nothing.
    async fn watch_sse(
        self: Arc<Self>,
        error_tx: tokio::sync::mpsc::UnboundedSender<LogEvent>,
        mut shutdown: tokio::sync::watch::Receiver<bool>,
    ) {
        use futures::StreamExt;
        let http = reqwest::Client::new();
        let url = format!("{}/sse", self.client.base_url());
        let mut attempt: u32 = 0;
        loop {
            if *shutdown.borrow() {
                return;
            }
            let response = tokio::select! {
                _ = shutdown.changed() => return,
                r = http.get(&url).send() => r,
            };
            match response {
                Ok(response) if response.status().is_success() => {
                    attempt = 0;
                    let mut parser = SseParser::default();
                    let mut stream = response.bytes_stream();
                    loop {
                        let chunk = tokio::select! {
                            _ = shutdown.changed() => return,
                            c = stream.next() => c,
                        };
                        let Some(Ok(bytes)) = chunk else { break };
                        for frame in parser.push(&String::from_utf8_lossy(&bytes)) {
                            if frame.event != "log" {
                                continue;
                            }
                            let Ok(event) = serde_json::from_str::<LogEvent>(&frame.data) else {
                                continue;
                            };
                            let is_error = event.severity == Severity::Error;
                            self.record_event(event.clone());
                            if is_error && error_tx.send(event).is_err() {
                                return;
                            }
                        }
                    }
                }
                _ => {}
            }
            let delay = backoff_delay_ms(
                attempt,
                self.config.backoff_base_ms,
                self.config.backoff_cap_ms,
            );
            attempt = attempt.saturating_add(1);
            tokio::select! {
                _ = shutdown.changed() => return,
                _ = tokio::time::sleep(std::time::Duration::from_millis(delay)) => {}
            }
        }
    }
}

/// Channel pair for stopping a running daemon.
pub fn shutdown_channel() -> (
    tokio::sync::watch::Sender<bool>,
    tokio::sync::watch::Receiver<bool>,
) {
    tokio::sync::watch::channel(false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deploy::StubInstaller;
    use crate::mcpserve::McpServer;
    use crate::platform::detect_platform;
    use crate::simbus::{SimBus, DEP_CAMERA};
    use crate::testutil::rig_fixture;
    use serde_json::json;

    fn event(severity: Severity, text: &str) -> LogEvent {
        LogEvent::new(EventSource::Server, severity, text.to_string())
    }

    #[test]
    fn sse_parser_reassembles_frames_split_across_chunks() {
        let mut parser = SseParser::default();
        assert!(parser.push("event: log\nda").is_empty());
        let frames = parser.push("ta: {\"x\":1}\n\nevent: heartbeat\ndata: {}\n\n");
        assert_eq!(
            frames,
            vec![
                SseFrame {
                    event: "log".to_string(),
                    data: "{\"x\":1}".to_string()
                },
                SseFrame {
                    event: "heartbeat".to_string(),
                    data: "{}".to_string()
                },
            ]
        );
    }

    #[test]
    fn backoff_doubles_from_half_a_second_and_caps_at_eight() {
        let delays: Vec<u64> = (0..6)
            .map(|n| backoff_delay_ms(n, BACKOFF_BASE_MS, BACKOFF_CAP_MS))
            .collect();
        assert_eq!(delays, vec![500, 1000, 2000, 4000, 8000, 8000]);
    }

    #[test]
    fn watch_buffer_drops_oldest_and_counts() {
        let mut buffer = WatchBuffer::new(4);
        for i in 0..6 {
            buffer.push(event(Severity::Info, &format!("e{i}")));
        }
        assert_eq!(buffer.len(), 4);
        assert_eq!(buffer.dropped(), 2);
        let texts: Vec<String> = buffer.recent(10).iter().map(|e| e.text.clone()).collect();
        assert_eq!(texts, vec!["e2", "e3", "e4", "e5"]);
    }

    #[test]
    fn classifier_applies_rules_in_order() {
        let dep = event(
            Severity::Error,
            "tool capture_image failed: missing dependency: cam_backend (call=c4)",
        );
        let mismatch = event(
            Severity::Error,
            "tool ping_controller failed: expect mismatch at step 3: wanted fa af 00 ff, got fa af 00 00 (call=c5)",
        )
        .with("tool", "ping_controller");
        let timeout = event(
            Severity::Error,
            "tool read_servo_angle failed: device not found: usb:2f24:a101:0 (call=c6)",
        )
        .with("device", "usb:2f24:a101:0");
        let corrupt = event(
            Severity::Error,
            "manifest corrupt: served manifest fails its hash check",
        );

        // dependency outranks everything else in the window
        let d = classify_window(
            &[mismatch.clone(), dep.clone(), timeout.clone()],
            DEFAULT_STRIKE_THRESHOLD,
        );
        assert_eq!(d.class, FailureClass::MissingDependency);
        assert_eq!(d.subject.as_deref(), Some("cam_backend"));

        // corrupt manifest outranks device strikes
        let d = classify_window(
            &[timeout.clone(), timeout.clone(), timeout.clone(), corrupt],
            DEFAULT_STRIKE_THRESHOLD,
        );
        assert_eq!(d.class, FailureClass::ManifestCorrupt);

        // three strikes on one device: lost
        let d = classify_window(
            &[timeout.clone(), timeout.clone(), timeout.clone()],
            DEFAULT_STRIKE_THRESHOLD,
        );
        assert_eq!(d.class, FailureClass::DeviceLost);
        assert_eq!(d.subject.as_deref(), Some("usb:2f24:a101:0"));

        // two strikes are not enough; a handler error in the same window wins
        let d = classify_window(
            &[timeout.clone(), timeout.clone(), mismatch.clone()],
            DEFAULT_STRIKE_THRESHOLD,
        );
        assert_eq!(d.class, FailureClass::HandlerError);
        assert_eq!(d.subject.as_deref(), Some("ping_controller"));

        // two bare strikes alone stay unknown rather than stretch a class
        let d = classify_window(&[timeout.clone(), timeout], DEFAULT_STRIKE_THRESHOLD);
        assert_eq!(d.class, FailureClass::Unknown);
    }

    #[test]
    fn postcondition_failures_classify_as_handler_errors() {
        let post = event(
            Severity::Error,
            "tool set_servo_angle failed: postcondition failed: angle commanded 40 read back 0 (tolerance 2) (call=c9)",
        )
        .with("tool", "set_servo_angle");
        let d = classify_window(&[post], DEFAULT_STRIKE_THRESHOLD);
        assert_eq!(d.class, FailureClass::HandlerError);
        assert_eq!(d.subject.as_deref(), Some("set_servo_angle"));
    }

    #[tokio::test]
    async fn agent_fallback_keeps_noise_unclassified() {
        let dir = tempfile::TempDir::new().unwrap();
        crate::fixtures::materialize_specs(dir.path()).unwrap();
        let specs = crate::specs::load_spec_set(dir.path()).unwrap();
        let agent = crate::agentport::StubAgent::builtin();
        let window = vec![event(Severity::Error, "something inexplicable happened")];
        let d = classify_with_agent(&window, DEFAULT_STRIKE_THRESHOLD, &agent, &specs)
            .await
            .unwrap();
        assert_eq!(d.class, FailureClass::Unknown);
    }

    async fn live_daemon(
        store: bool,
    ) -> (
        McpServer,
        Arc<SimBus>,
        Arc<Daemon>,
        Option<tempfile::TempDir>,
    ) {
        let fix = rig_fixture().await;
        let bus = Arc::clone(&fix.bus);
        let server = McpServer::start(
            fix.manifest.clone(),
            Arc::clone(&bus) as Arc<dyn DeviceBus>,
            0,
        )
        .await
        .unwrap();
        let dir = store.then(|| tempfile::TempDir::new().unwrap());
        let state_store = dir.as_ref().map(|d| StateStore::new(d.path()));
        if let Some(s) = &state_store {
            s.save_inventory(&fix.inventory).unwrap();
            s.save_identification(&fix.identification).unwrap();
            s.save_manifest(&fix.manifest).unwrap();
        }
        let installer = Arc::new(StubInstaller::new(Arc::clone(&bus) as Arc<dyn DeviceBus>));
        let daemon = Daemon::new(DaemonSeed {
            state: Arc::clone(&server.state),
            endpoint: server.url(),
            bus: Arc::clone(&bus) as Arc<dyn DeviceBus>,
            agent: fix.agent.clone(),
            specs: fix.specs.clone(),
            db: DeviceDatabase::builtin(),
            identify_config: IdentifyConfig::default(),
            platform: detect_platform(true),
            store: state_store,
            installer: Some(installer as Arc<dyn Installer>),
            config: DaemonConfig {
                quiet_window_ms: 40,
                perceive_interval_ms: 50,
                integrity_interval_ms: 30,
                replug_wait_ms: 30,
                ..DaemonConfig::default()
            },
        });
        (server, bus, daemon, dir)
    }

    #[tokio::test]
    async fn perceive_retains_two_keyframes_and_a_grounded_caption() {
        let (server, _bus, daemon, dir) = live_daemon(true).await;
        let client = McpClient::new(&server.url());
        client.initialize().await.unwrap();

        let first = daemon.perceive_once().await.unwrap();
        assert_eq!(first.keyframes.len(), 1);
        assert!(first.caption.contains("1 keyframe(s)"));

        client
            .tools_call("set_servo_angle", json!({"joint": 1, "angle": 60}))
            .await
            .unwrap();
        let second = daemon.perceive_once().await.unwrap();
        assert_eq!(second.keyframes.len(), 2);
        assert!(second.caption.contains("2 keyframe(s)"));

        client
            .tools_call("set_servo_angle", json!({"joint": 1, "angle": -60}))
            .await
            .unwrap();
        let third = daemon.perceive_once().await.unwrap();
        assert_eq!(third.keyframes.len(), 2, "memory never exceeds two frames");
        assert_ne!(third.keyframes, second.keyframes);
        for claimed in &third.based_on {
            assert!(third.keyframes.contains(claimed));
        }

        let store = StateStore::new(dir.as_ref().unwrap().path());
        let stored: Vec<PerceptSummary> = store.load_json(PERCEPTS_FILE).unwrap();
        assert_eq!(stored.len(), 3);
        assert_eq!(stored[2], third);
    }

    #[tokio::test]
    async fn heal_reinstalls_a_vanished_dependency() {
        let (server, bus, daemon, _dir) = live_daemon(false).await;
        bus.set_dependency(DEP_CAMERA, false);
        let client = McpClient::new(&server.url());
        client.initialize().await.unwrap();
        let result = client.tools_call("capture_image", json!({})).await.unwrap();
        assert!(result.is_error);

        let window = vec![event(
            Severity::Error,
            &format!("tool capture_image failed: missing dependency: {DEP_CAMERA} (call=c1)"),
        )];
        let record = daemon.diagnose_and_heal(&window).await.unwrap();
        assert!(record.healed);
        assert_eq!(record.class, FailureClass::MissingDependency);
        assert_eq!(record.attempts, 1);
        assert!(bus.has_dependency(DEP_CAMERA));
        let result = client.tools_call("capture_image", json!({})).await.unwrap();
        assert!(!result.is_error);
        assert_eq!(daemon.mode(), DaemonMode::Watching);
    }

    #[tokio::test]
    async fn heal_rebuilds_a_corrupt_manifest_from_persisted_state() {
        let (server, _bus, daemon, _dir) = live_daemon(true).await;
        let good_hash = server.state.manifest().manifest_hash.clone();

        // corrupt the served manifest in place: content changes, seal doesn't
        let mut doctored = (*server.state.manifest()).clone();
        doctored.tools[0].tool.description = "tampered".to_string();
        server.state.swap_manifest(doctored);
        assert!(!daemon.integrity_check());

        // integrity_check emits the marker over SSE; classify it directly here
        let marker = vec![event(
            Severity::Error,
            "manifest corrupt: served manifest fails its hash check",
        )];
        let record = daemon.diagnose_and_heal(&marker).await.unwrap();
        assert!(record.healed, "{}", record.action);
        assert_eq!(record.class, FailureClass::ManifestCorrupt);
        assert_eq!(server.state.manifest().manifest_hash, good_hash);
        assert!(server.state.manifest().verify_hash());
    }

    #[tokio::test]
    async fn heal_waits_out_a_replug_after_device_loss() {
        let (server, bus, daemon, _dir) = live_daemon(true).await;
        let servo = "usb:2f24:a101:0";
        bus.drop_device(servo);
        let client = McpClient::new(&server.url());
        client.initialize().await.unwrap();
        let mut window = Vec::new();
        for _ in 0..3 {
            let result = client
                .tools_call("read_servo_angle", json!({"joint": 1}))
                .await
                .unwrap();
            assert!(result.is_error);
            window.push(
                event(
                    Severity::Error,
                    &format!("tool read_servo_angle failed: {}", result.text().unwrap()),
                )
                .with("device", servo),
            );
        }

        // replug midway: restore after the first failed attempt
        let bus_for_replug = Arc::clone(&bus);
        let replug = tokio::spawn(async move {
            tokio::time::sleep(std::time::Duration::from_millis(45)).await;
            bus_for_replug.restore_device("usb:2f24:a101:0");
        });
        let record = daemon.diagnose_and_heal(&window).await.unwrap();
        replug.await.unwrap();
        assert!(record.healed, "{}", record.action);
        assert_eq!(record.class, FailureClass::DeviceLost);
        assert!(record.attempts >= 2, "first probe ran before the replug");
        assert!(record.action.contains("reappeared"));

        let result = client
            .tools_call("set_servo_angle", json!({"joint": 1, "angle": 15}))
            .await
            .unwrap();
        assert!(!result.is_error);
        assert_eq!(daemon.mode(), DaemonMode::Watching);
    }

    #[tokio::test]
    async fn device_still_absent_after_attempts_degrades() {
        let (_server, bus, daemon, _dir) = live_daemon(true).await;
        let servo = "usb:2f24:a101:0";
        bus.drop_device(servo);
        let window: Vec<LogEvent> = (0..3)
            .map(|_| {
                event(
                    Severity::Error,
                    &format!("tool read_servo_angle failed: device not found: {servo}"),
                )
                .with("device", servo)
            })
            .collect();
        let record = daemon.diagnose_and_heal(&window).await.unwrap();
        assert!(!record.healed);
        assert_eq!(record.attempts, MAX_HEAL_ATTEMPTS);
        assert!(record.action.contains("still absent"));
        assert_eq!(daemon.mode(), DaemonMode::Degraded);
    }

    #[tokio::test]
    async fn heal_swaps_a_corrected_handler_plan() {
        let (server, _bus, daemon, _dir) = live_daemon(true).await;
        let client = McpClient::new(&server.url());
        client.initialize().await.unwrap();

        // sabotage ping_controller: expect a NAK that never comes
        let mut plan = server
            .state
            .manifest()
            .tool("ping_controller")
            .unwrap()
            .plan
            .clone();
        plan.steps[3] = PlanStep::Expect {
            pattern: "FA AF 00 FF".to_string(),
        };
        server.state.swap_plan("ping_controller", plan).unwrap();
        let result = client
            .tools_call("ping_controller", json!({}))
            .await
            .unwrap();
        assert!(result.is_error);

        let window = vec![event(
            Severity::Error,
            &format!(
                "tool ping_controller failed: {} (call=c2)",
                result.text().unwrap()
            ),
        )
        .with("tool", "ping_controller")];
        let record = daemon.diagnose_and_heal(&window).await.unwrap();
        assert!(record.healed, "{}", record.action);
        assert_eq!(record.class, FailureClass::HandlerError);
        assert!(record.action.contains("ping_controller"));

        let result = client
            .tools_call("ping_controller", json!({}))
            .await
            .unwrap();
        assert!(!result.is_error);
        assert_eq!(result.text().as_deref(), Some("1"));
    }

    #[tokio::test]
    async fn run_loop_watches_heals_and_perceives_end_to_end() {
        let (server, bus, daemon, dir) = live_daemon(true).await;
        let (stop_tx, stop_rx) = shutdown_channel();
        let runner = tokio::spawn(Arc::clone(&daemon).run(stop_rx));

        // give the watcher a beat to attach, then break the camera backend
        tokio::time::sleep(std::time::Duration::from_millis(60)).await;
        bus.set_dependency(DEP_CAMERA, false);
        let client = McpClient::new(&server.url());
        client.initialize().await.unwrap();
        let result = client.tools_call("capture_image", json!({})).await.unwrap();
        assert!(result.is_error);

        let deadline = tokio::time::Instant::now() + std::time::Duration::from_secs(5);
        while tokio::time::Instant::now() < deadline {
            if daemon.heal_log().iter().any(|r| r.healed) {
                break;
            }
            tokio::time::sleep(std::time::Duration::from_millis(25)).await;
        }
        let log = daemon.heal_log();
        assert!(
            log.iter()
                .any(|r| r.healed && r.class == FailureClass::MissingDependency),
            "{log:?}"
        );
        assert!(bus.has_dependency(DEP_CAMERA));

        // perceive ticks persist summaries on their own
        let store = StateStore::new(dir.as_ref().unwrap().path());
        let deadline = tokio::time::Instant::now() + std::time::Duration::from_secs(5);
        loop {
            let stored: Vec<PerceptSummary> = store.load_json(PERCEPTS_FILE).unwrap_or_default();
            if !stored.is_empty() {
                assert!(stored[0].keyframes.len() <= MAX_KEYFRAMES);
                break;
            }
            assert!(
                tokio::time::Instant::now() < deadline,
                "no percept persisted in time"
            );
            tokio::time::sleep(std::time::Duration::from_millis(25)).await;
        }

        // the watcher fed the buffer over SSE
        assert!(!daemon.buffered(64).is_empty());

        stop_tx.send(true).unwrap();
        runner.await.unwrap();
    }
}
