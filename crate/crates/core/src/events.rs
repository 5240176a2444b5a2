//! Log events shared between the server runtime and the daemon.
//!
//! The server emits these over its SSE channel; the daemon's watch stage
//! consumes them. They are plain data so both sides can live in separate
//! processes and still agree on the wire form.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Where a log event originated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventSource {
    Server,
    Pipeline,
    Deploy,
    Bus,
    Daemon,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Info,
    Warn,
    Error,
}

/// One log line, with optional structured fields for classifiers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEvent {
    /// Milliseconds since the Unix epoch.
    pub at: u64,
    pub source: EventSource,
    pub severity: Severity,
    pub text: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub structured: BTreeMap<String, String>,
}

impl LogEvent {
    pub fn new(source: EventSource, severity: Severity, text: impl Into<String>) -> Self {
        let text = text.into();
        debug_assert!(!text.is_empty(), "log event text must be non-empty");
        Self {
            at: now_ms(),
            source,
            severity,
            text,
            structured: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<String>) -> Self {
        self.structured.insert(key.to_string(), value.into());
        self
    }
}

/// Milliseconds since the Unix epoch.
pub fn now_ms() -> u64 {
    use std::time::{SystemTime, UNIX_EPOCH};
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// RFC 3339 timestamp for provenance records.
pub fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}
