//! The coding-agent port: every model interaction in the system goes through
//! the `AgentPort` trait, so the rest of the pipeline stays testable offline.
//!
//! `StubAgent` answers from a script table and is fully deterministic.
//! `RemoteAgent` speaks a generic chat-completions API and is the only place
//! in the crate that performs model API calls — `model_api_calls()` counts
//! them so tests can assert the boundary holds.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use async_trait::async_trait;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::hashing::sha256_hex;

/// Process-wide count of remote model API requests. Stays zero as long as
/// only the stub agent runs.
static MODEL_API_CALLS: AtomicU64 = AtomicU64::new(0);

pub fn model_api_calls() -> u64 {
    MODEL_API_CALLS.load(Ordering::SeqCst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    IdentifyDevice,
    DraftPlan,
    HealPlan,
    Caption,
    Classify,
}

impl Purpose {
    pub fn name(self) -> &'static str {
        match self {
            Purpose::IdentifyDevice => "identify_device",
            Purpose::DraftPlan => "draft_plan",
            Purpose::HealPlan => "heal_plan",
            Purpose::Caption => "caption",
            Purpose::Classify => "classify",
        }
    }
}

/// Binary payload riding along with a prompt (camera keyframes, mostly).
#[derive(Debug, Clone)]
pub struct Attachment {
    pub media_type: String,
    pub bytes: Vec<u8>,
}

impl Attachment {
    pub fn png(bytes: Vec<u8>) -> Self {
        Self {
            media_type: "image/png".to_string(),
            bytes,
        }
    }

    pub fn digest(&self) -> String {
        sha256_hex(&self.bytes)
    }
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("no script entry matched purpose {purpose} for this prompt")]
    NoScriptEntry { purpose: &'static str },
    #[error("agent transport: {0}")]
    Transport(String),
    #[error("agent response was not JSON: {0}")]
    BadResponse(String),
    #[error("agent configuration: {0}")]
    Config(String),
}

#[async_trait]
pub trait AgentPort: Send + Sync {
    /// Run one completion. The response is the parsed JSON object the agent
    /// produced; callers validate it against the schema for `purpose`.
    async fn complete(
        &self,
        purpose: Purpose,
        prompt: &str,
        attachments: &[Attachment],
    ) -> Result<Value, AgentError>;

    /// How many completions this port has served.
    fn calls(&self) -> u64;
}

// ---------------------------------------------------------------------------
// Stub agent

#[derive(Debug, Clone, Deserialize)]
struct ScriptEntry {
    purpose: String,
    prompt_contains: String,
    response: Value,
}

/// Deterministic scripted agent. Entries match on (purpose, substring) in
/// file order, first hit wins. Captions without a script entry are
/// synthesized from the attachments so perception works out of the box.
pub struct StubAgent {
    entries: Vec<ScriptEntry>,
    calls: AtomicU64,
    prompts: Mutex<Vec<(Purpose, String)>>,
}

impl StubAgent {
    pub fn from_json(text: &str) -> Result<Self, AgentError> {
        let entries: Vec<ScriptEntry> =
            serde_json::from_str(text).map_err(|e| AgentError::Config(e.to_string()))?;
        Ok(Self {
            entries,
            calls: AtomicU64::new(0),
            prompts: Mutex::new(Vec::new()),
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, AgentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AgentError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// The script shipped in the repo fixtures.
    pub fn builtin() -> Self {
        Self::from_json(crate::fixtures::AGENT_SCRIPT).expect("embedded agent script must parse")
    }

    /// Prompts seen so far, for assertions on rendered spec content.
    pub fn prompt_log(&self) -> Vec<(Purpose, String)> {
        self.prompts.lock().expect("prompt log lock").clone()
    }

    fn synthesize_caption(prompt: &str, attachments: &[Attachment]) -> Value {
        let digests: Vec<String> = attachments.iter().map(Attachment::digest).collect();
        let markers: usize = attachments
            .iter()
            .filter_map(|a| image::load_from_memory(&a.bytes).ok())
            .map(|img| {
                let luma = img.to_luma8();
                luma.pixels().filter(|p| p.0[0] == 255).count() / 9
            })
            .max()
            .unwrap_or(0);
        let scene = digests
            .first()
            .map(|d| d[..8].to_string())
            .unwrap_or_else(|| sha256_hex(prompt.as_bytes())[..8].to_string());
        Value::Object(serde_json::Map::from_iter([
            (
                "caption".to_string(),
                json!(format!(
                    "scene {scene}: {} keyframe(s), {} marker(s) visible",
                    attachments.len(),
                    markers
                )),
            ),
            ("based_on".to_string(), json!(digests)),
        ]))
    }
}

#[async_trait]
impl AgentPort for StubAgent {
    async fn complete(
        &self,
        purpose: Purpose,
        prompt: &str,
        attachments: &[Attachment],
    ) -> Result<Value, AgentError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.prompts
            .lock()
            .expect("prompt log lock")
            .push((purpose, prompt.to_string()));
        for entry in &self.entries {
            if entry.purpose == purpose.name() && prompt.contains(&entry.prompt_contains) {
                return Ok(entry.response.clone());
            }
        }
        match purpose {
            Purpose::Caption => Ok(Self::synthesize_caption(prompt, attachments)),
            Purpose::Classify => Ok(json!({"class": "unknown", "rationale": "no script entry"})),
            _ => Err(AgentError::NoScriptEntry {
                purpose: purpose.name(),
            }),
        }
    }

    fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

// ---------------------------------------------------------------------------
// Remote agent

/// Chat-completions client. Model calls happen here and nowhere else.
pub struct RemoteAgent {
    client: reqwest::Client,
    url: String,
    api_key: Option<String>,
    model: String,
    in_flight: tokio::sync::Semaphore,
    calls: AtomicU64,
}

impl RemoteAgent {
    pub const MAX_IN_FLIGHT: usize = 4;
    const RETRIES: u32 = 2;

    pub fn new(url: String, api_key: Option<String>, model: String) -> Self {
        Self {
            client: reqwest::Client::new(),
            url,
            api_key,
            model,
            in_flight: tokio::sync::Semaphore::new(Self::MAX_IN_FLIGHT),
            calls: AtomicU64::new(0),
        }
    }

    /// Configuration from `OCTOPUS_AGENT_URL`, `OCTOPUS_AGENT_KEY` and
    /// `OCTOPUS_AGENT_MODEL`.
    pub fn from_env() -> Result<Self, AgentError> {
        let url = std::env::var("OCTOPUS_AGENT_URL")
            .map_err(|_| AgentError::Config("OCTOPUS_AGENT_URL is not set".to_string()))?;
        let api_key = std::env::var("OCTOPUS_AGENT_KEY").ok();
        let model =
            std::env::var("OCTOPUS_AGENT_MODEL").unwrap_or_else(|_| "general-coder-1".to_string());
        Ok(Self::new(url, api_key, model))
    }

    fn request_body(&self, purpose: Purpose, prompt: &str, attachments: &[Attachment]) -> Value {
        let mut content = vec![json!({"type": "text", "text": prompt})];
        for a in attachments {
            let encoded = base64::engine::general_purpose::STANDARD.encode(&a.bytes);
            content.push(json!({
                "type": "image_url",
                "image_url": {"url": format!("data:{};base64,{encoded}", a.media_type)}
            }));
        }
        json!({
            "model": self.model,
            "messages": [{"role": "user", "content": content}],
            "metadata": {"purpose": purpose.name()},
            "temperature": 0
        })
    }

    async fn post_once(&self, body: &Value) -> Result<String, AgentError> {
        MODEL_API_CALLS.fetch_add(1, Ordering::SeqCst);
        let mut req = self.client.post(&self.url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .await
            .map_err(|e| AgentError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .text()
            .await
            .map_err(|e| AgentError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(AgentError::Transport(format!("status {status}: {text}")));
        }
        let parsed: Value =
            serde_json::from_str(&text).map_err(|e| AgentError::BadResponse(e.to_string()))?;
        parsed["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| {
                AgentError::BadResponse("response missing choices[0].message.content".to_string())
            })
    }
}

#[async_trait]
impl AgentPort for RemoteAgent {
    async fn complete(
        &self,
        purpose: Purpose,
        prompt: &str,
        attachments: &[Attachment],
    ) -> Result<Value, AgentError> {
        let _permit = self
            .in_flight
            .acquire()
            .await
            .expect("agent semaphore never closes");
        self.calls.fetch_add(1, Ordering::SeqCst);
        let body = self.request_body(purpose, prompt, attachments);
        let mut last_err = AgentError::Transport("unreachable".to_string());
        for attempt in 0..=Self::RETRIES {
            if attempt > 0 {
                tokio::time::sleep(std::time::Duration::from_millis(250 * u64::from(attempt)))
                    .await;
            }
            match self.post_once(&body).await {
                Ok(content) => {
                    let text = extract_json_object(&content).ok_or_else(|| {
                        AgentError::BadResponse(format!(
                            "no JSON object in agent reply: {content:.120}"
                        ))
                    })?;
                    return serde_json::from_str(&text)
                        .map_err(|e| AgentError::BadResponse(e.to_string()));
                }
                Err(e) => last_err = e,
            }
        }
        Err(last_err)
    }

    fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

/// Pull the first balanced JSON object out of free-form model text, honoring
/// string literals and escapes.
pub fn extract_json_object(text: &str) -> Option<String> {
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, c) in text[start..].char_indices() {
        if in_string {
            match (escaped, c) {
                (true, _) => escaped = false,
                (false, '\\') => escaped = true,
                (false, '"') => in_string = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(text[start..=start + i].to_string());
                }
            }
            _ => {}
        }
    }
    None
}

/// Build the configured agent. `kind` is `stub` (default) or `remote`;
/// `script` overrides the stub's script file.
pub fn agent_from_config(
    kind: &str,
    script: Option<&Path>,
) -> Result<std::sync::Arc<dyn AgentPort>, AgentError> {
    match kind {
        "" | "stub" => {
            let stub = match script {
                Some(path) => StubAgent::from_file(path)?,
                None => StubAgent::builtin(),
            };
            Ok(std::sync::Arc::new(stub))
        }
        "remote" => Ok(std::sync::Arc::new(RemoteAgent::from_env()?)),
        other => Err(AgentError::Config(format!(
            "unknown agent kind: {other} (expected stub or remote)"
        ))),
    }
}

// ---------------------------------------------------------------------------
// Response schemas

const CAPABILITY_KINDS: [&str; 4] = ["actuator", "sensor", "comm", "meta"];
const PARAM_TYPES: [&str; 4] = ["integer", "number", "string", "boolean"];
const FAILURE_CLASSES: [&str; 5] = [
    "missing_dependency",
    "device_lost",
    "manifest_corrupt",
    "handler_error",
    "unknown",
];

fn verb_re() -> &'static regex::Regex {
    use std::sync::OnceLock;
    static RE: OnceLock<regex::Regex> = OnceLock::new();
    RE.get_or_init(|| regex::Regex::new(r"^[a-z][a-z0-9_]*$").unwrap())
}

fn require_str(errors: &mut Vec<String>, value: &Value, path: &str) -> Option<String> {
    match value.as_str() {
        Some(s) if !s.is_empty() => Some(s.to_string()),
        Some(_) => {
            errors.push(format!("{path}: must not be empty"));
            None
        }
        None => {
            errors.push(format!("{path}: expected string"));
            None
        }
    }
}

fn check_params(errors: &mut Vec<String>, value: &Value, path: &str) {
    let Some(params) = value.as_array() else {
        errors.push(format!("{path}: expected array"));
        return;
    };
    for (i, p) in params.iter().enumerate() {
        let p_path = format!("{path}[{i}]");
        if !p.is_object() {
            errors.push(format!("{p_path}: expected object"));
            continue;
        }
        if let Some(name) = require_str(errors, &p["name"], &format!("{p_path}.name")) {
            if !verb_re().is_match(&name) {
                errors.push(format!("{p_path}.name: not snake_case: {name}"));
            }
        }
        match p["type"].as_str() {
            Some(t) if PARAM_TYPES.contains(&t) => {}
            Some(t) => errors.push(format!("{p_path}.type: unknown type {t}")),
            None => errors.push(format!("{p_path}.type: expected string")),
        }
        for bound in ["min", "max"] {
            if !p[bound].is_null() && !p[bound].is_number() {
                errors.push(format!("{p_path}.{bound}: expected number"));
            }
        }
        if let (Some(min), Some(max)) = (p["min"].as_f64(), p["max"].as_f64()) {
            if min > max {
                errors.push(format!("{p_path}: min {min} exceeds max {max}"));
            }
        }
    }
}

/// Validate an identification response: device name plus capability list.
pub fn validate_identify_v1(value: &Value) -> Vec<String> {
    let mut errors = Vec::new();
    if !value.is_object() {
        return vec!["identify: expected object".to_string()];
    }
    require_str(&mut errors, &value["name"], "name");
    let Some(caps) = value["capabilities"].as_array() else {
        errors.push("capabilities: expected array".to_string());
        return errors;
    };
    for (i, cap) in caps.iter().enumerate() {
        let path = format!("capabilities[{i}]");
        if let Some(verb) = require_str(&mut errors, &cap["verb"], &format!("{path}.verb")) {
            if !verb_re().is_match(&verb) {
                errors.push(format!("{path}.verb: not snake_case: {verb}"));
            }
        }
        match cap["kind"].as_str() {
            Some(k) if CAPABILITY_KINDS.contains(&k) => {}
            Some(k) => errors.push(format!("{path}.kind: unknown kind {k}")),
            None => errors.push(format!("{path}.kind: expected string")),
        }
        if !cap["confidence"].is_null() {
            match cap["confidence"].as_f64() {
                Some(c) if (0.0..=1.0).contains(&c) => {}
                _ => errors.push(format!("{path}.confidence: expected number in [0, 1]")),
            }
        }
        check_params(&mut errors, &cap["params"], &format!("{path}.params"));
    }
    errors
}

fn write_token_re() -> &'static regex::Regex {
    use std::sync::OnceLock;
    static RE: OnceLock<regex::Regex> = OnceLock::new();
    RE.get_or_init(|| {
        regex::Regex::new(r"^([0-9A-Fa-f]{2}|CK|\{[a-z][a-z0-9_]*(_lo|_hi)?\})$").unwrap()
    })
}

fn expect_token_re() -> &'static regex::Regex {
    use std::sync::OnceLock;
    static RE: OnceLock<regex::Regex> = OnceLock::new();
    RE.get_or_init(|| {
        regex::Regex::new(r"^([0-9A-Fa-f]{2}|\?\?|\{[a-z][a-z0-9_]*(_lo|_hi)?\})$").unwrap()
    })
}

fn check_u64_range(errors: &mut Vec<String>, value: &Value, path: &str, lo: u64, hi: u64) {
    match value.as_u64() {
        Some(v) if (lo..=hi).contains(&v) => {}
        _ => errors.push(format!("{path}: expected integer in [{lo}, {hi}]")),
    }
}

/// Validate a handler plan: step list plus optional postcondition.
pub fn validate_plan_v1(value: &Value) -> Vec<String> {
    let mut errors = Vec::new();
    if !value.is_object() {
        return vec!["plan: expected object".to_string()];
    }
    let Some(steps) = value["steps"].as_array() else {
        errors.push("steps: expected array".to_string());
        return errors;
    };
    if steps.is_empty() {
        errors.push("steps: must not be empty".to_string());
    }
    for (i, step) in steps.iter().enumerate() {
        let path = format!("steps[{i}]");
        let Some(op) = step["op"].as_str() else {
            errors.push(format!("{path}.op: expected string"));
            continue;
        };
        match op {
            "open" => {
                require_str(&mut errors, &step["bus"], &format!("{path}.bus"));
                require_str(&mut errors, &step["address"], &format!("{path}.address"));
            }
            "write" => {
                if let Some(template) =
                    require_str(&mut errors, &step["template"], &format!("{path}.template"))
                {
                    for token in template.split_whitespace() {
                        if !write_token_re().is_match(token) {
                            errors.push(format!("{path}.template: bad token {token}"));
                        }
                    }
                }
            }
            "read" => {
                check_u64_range(
                    &mut errors,
                    &step["length"],
                    &format!("{path}.length"),
                    1,
                    4096,
                );
                check_u64_range(
                    &mut errors,
                    &step["timeout_ms"],
                    &format!("{path}.timeout_ms"),
                    1,
                    10_000,
                );
            }
            "expect" => {
                if let Some(pattern) =
                    require_str(&mut errors, &step["pattern"], &format!("{path}.pattern"))
                {
                    for token in pattern.split_whitespace() {
                        if !expect_token_re().is_match(token) {
                            errors.push(format!("{path}.pattern: bad token {token}"));
                        }
                    }
                }
            }
            "capture_frame" => {
                require_str(
                    &mut errors,
                    &step["camera_key"],
                    &format!("{path}.camera_key"),
                );
            }
            "gpio_set" => {
                require_str(&mut errors, &step["line"], &format!("{path}.line"));
                require_str(&mut errors, &step["value"], &format!("{path}.value"));
            }
            "delay" => {
                check_u64_range(&mut errors, &step["ms"], &format!("{path}.ms"), 0, 60_000);
            }
            other => errors.push(format!("{path}.op: unknown op {other}")),
        }
    }
    match &value["postcondition"] {
        Value::Null => {}
        pc @ Value::Object(_) => {
            match pc["kind"].as_str() {
                Some("readback_within") => {}
                Some(k) => errors.push(format!("postcondition.kind: unknown kind {k}")),
                None => errors.push("postcondition.kind: expected string".to_string()),
            }
            require_str(&mut errors, &pc["param"], "postcondition.param");
            match pc["tolerance"].as_f64() {
                Some(t) if t >= 0.0 => {}
                _ => errors.push("postcondition.tolerance: expected number >= 0".to_string()),
            }
        }
        _ => errors.push("postcondition: expected object or null".to_string()),
    }
    errors
}

/// Validate a caption response.
pub fn validate_caption_v1(value: &Value) -> Vec<String> {
    let mut errors = Vec::new();
    if !value.is_object() {
        return vec!["caption: expected object".to_string()];
    }
    require_str(&mut errors, &value["caption"], "caption");
    match value["based_on"].as_array() {
        Some(items) => {
            for (i, item) in items.iter().enumerate() {
                if !item.is_string() {
                    errors.push(format!("based_on[{i}]: expected string"));
                }
            }
        }
        None => errors.push("based_on: expected array".to_string()),
    }
    errors
}

/// Validate a failure classification response.
pub fn validate_classify_v1(value: &Value) -> Vec<String> {
    let mut errors = Vec::new();
    if !value.is_object() {
        return vec!["classify: expected object".to_string()];
    }
    match value["class"].as_str() {
        Some(c) if FAILURE_CLASSES.contains(&c) => {}
        Some(c) => errors.push(format!("class: unknown class {c}")),
        None => errors.push("class: expected string".to_string()),
    }
    errors
}

#[cfg(test)]
mod tests {
    use super::*;

    #[tokio::test]
    async fn stub_matches_script_entries_in_order() {
        let agent = StubAgent::builtin();
        let response = agent
            .complete(
                Purpose::IdentifyDevice,
                "device usb 1209:7301 unknown vendor",
                &[],
            )
            .await
            .unwrap();
        assert_eq!(response["name"], "Generic Servo Driver");
        assert_eq!(response["capabilities"][0]["verb"], "set_servo_angle");
        assert_eq!(agent.calls(), 1);
    }

    #[tokio::test]
    async fn stub_is_deterministic_across_repeats() {
        let agent = StubAgent::builtin();
        let prompt = "tool: set_servo_angle on usb:2f24:a101:0";
        let first = agent
            .complete(Purpose::DraftPlan, prompt, &[])
            .await
            .unwrap();
        for _ in 0..100 {
            let next = agent
                .complete(Purpose::DraftPlan, prompt, &[])
                .await
                .unwrap();
            assert_eq!(next, first);
        }
        assert_eq!(agent.calls(), 101);
    }

    #[tokio::test]
    async fn stub_misses_are_errors_for_plans_but_not_captions() {
        let agent = StubAgent::builtin();
        let err = agent
            .complete(Purpose::DraftPlan, "tool: warp_drive", &[])
            .await
            .unwrap_err();
        assert!(err.to_string().contains("draft_plan"));
        let caption = agent
            .complete(Purpose::Caption, "describe the scene", &[])
            .await
            .unwrap();
        assert!(validate_caption_v1(&caption).is_empty());
    }

    #[tokio::test]
    async fn stub_caption_reflects_attachment_digests() {
        let agent = StubAgent::builtin();
        let frame = crate::simbus::render_frame(&[0.0, 45.0]);
        let attachment = Attachment::png(frame);
        let digest = attachment.digest();
        let caption = agent
            .complete(
                Purpose::Caption,
                "describe",
                std::slice::from_ref(&attachment),
            )
            .await
            .unwrap();
        assert_eq!(caption["based_on"][0], digest.as_str());
        let text = caption["caption"].as_str().unwrap();
        assert!(text.contains(&digest[..8]));
        assert!(text.contains("2 marker(s)"));
        // same attachment, same caption
        let again = agent
            .complete(Purpose::Caption, "describe", &[attachment])
            .await
            .unwrap();
        assert_eq!(again, caption);
    }

    #[test]
    fn identify_schema_accepts_the_scripted_response() {
        let agent = StubAgent::builtin();
        let entry = agent
            .entries
            .iter()
            .find(|e| e.purpose == "identify_device")
            .unwrap();
        assert!(validate_identify_v1(&entry.response).is_empty());
    }

    #[test]
    fn identify_schema_rejects_bad_shapes() {
        let bad = json!({"name": "X", "capabilities": [
            {"verb": "Bad-Verb", "kind": "warp", "confidence": 7, "params": [
                {"name": "p", "type": "flux", "min": 9, "max": 1}
            ]}
        ]});
        let errors = validate_identify_v1(&bad);
        assert_eq!(errors.len(), 5);
        assert!(errors.iter().any(|e| e.contains("not snake_case")));
        assert!(errors.iter().any(|e| e.contains("unknown kind")));
        assert!(errors.iter().any(|e| e.contains("confidence")));
        assert!(errors.iter().any(|e| e.contains("unknown type flux")));
        assert!(errors.iter().any(|e| e.contains("min 9 exceeds max 1")));
    }

    #[test]
    fn plan_schema_accepts_every_scripted_plan() {
        let agent = StubAgent::builtin();
        for entry in &agent.entries {
            if entry.purpose == "draft_plan" || entry.purpose == "heal_plan" {
                let errors = validate_plan_v1(&entry.response);
                assert!(errors.is_empty(), "{}: {errors:?}", entry.prompt_contains);
            }
        }
    }

    #[test]
    fn plan_schema_rejects_bad_steps() {
        assert_eq!(
            validate_plan_v1(&json!({"steps": [], "postcondition": null})),
            vec!["steps: must not be empty"]
        );
        let bad = json!({"steps": [
            {"op": "write", "template": "FA GG {Bad}"},
            {"op": "read", "length": 0, "timeout_ms": 99999},
            {"op": "teleport"}
        ], "postcondition": {"kind": "readback_within", "param": "angle", "tolerance": -1}});
        let errors = validate_plan_v1(&bad);
        assert!(errors.iter().any(|e| e.contains("bad token GG")));
        assert!(errors.iter().any(|e| e.contains("bad token {Bad}")));
        assert!(errors.iter().any(|e| e.contains("steps[1].length")));
        assert!(errors.iter().any(|e| e.contains("steps[1].timeout_ms")));
        assert!(errors.iter().any(|e| e.contains("unknown op teleport")));
        assert!(errors.iter().any(|e| e.contains("tolerance")));
    }

    #[test]
    fn classify_schema_pins_the_class_list() {
        for class in FAILURE_CLASSES {
            assert!(validate_classify_v1(&json!({"class": class})).is_empty());
        }
        assert_eq!(
            validate_classify_v1(&json!({"class": "cosmic_rays"})),
            vec!["class: unknown class cosmic_rays"]
        );
    }

    #[test]
    fn json_extraction_handles_prose_and_strings() {
        assert_eq!(
            extract_json_object("Sure! Here you go: {\"a\": 1} hope that helps").as_deref(),
            Some("{\"a\": 1}")
        );
        let nested = r#"prefix {"a": {"b": "with } brace", "c": "esc\""}} suffix"#;
        let extracted = extract_json_object(nested).unwrap();
        let parsed: Value = serde_json::from_str(&extracted).unwrap();
        assert_eq!(parsed["a"]["b"], "with } brace");
        assert_eq!(extract_json_object("no json here"), None);
    }

    #[test]
    fn agent_factory_rejects_unknown_kinds() {
        assert!(agent_from_config("stub", None).is_ok());
        assert!(agent_from_config("", None).is_ok());
        let Err(err) = agent_from_config("psychic", None) else {
            panic!("unknown agent kinds must be rejected");
        };
        assert!(err.to_string().contains("unknown agent kind"));
    }
}
