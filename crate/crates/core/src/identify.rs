//! Identification: map enumerated devices to named capability sets, first
//! through the local device database, then through the agent for anything
//! unknown. Capabilities are ranked globally and capped so a crowded bus
//! cannot flood the tool surface.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::agentport::{validate_identify_v1, AgentPort, Purpose};
use crate::events::{EventSource, LogEvent, Severity};
use crate::hashing::sha256_hex;
use crate::platform::HardwareInventory;
use crate::specs::{context, render_prompt, SpecError, SpecSet, Stage};

/// Confidence assigned to capabilities that came from the local database.
pub const DB_CONFIDENCE: f64 = 0.95;
/// Confidence assumed when the agent omits one.
pub const AGENT_DEFAULT_CONFIDENCE: f64 = 0.8;
/// Capabilities scoring below this are dropped.
pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.5;
/// At most this many capabilities become tools.
pub const DEFAULT_CAP: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapabilityKind {
    Actuator,
    Sensor,
    Comm,
    Meta,
}

impl CapabilityKind {
    /// Ranking position within one confidence band; actuators come first.
    pub fn rank(self) -> u8 {
        match self {
            CapabilityKind::Actuator => 0,
            CapabilityKind::Sensor => 1,
            CapabilityKind::Comm => 2,
            CapabilityKind::Meta => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CapabilityKind::Actuator => "actuator",
            CapabilityKind::Sensor => "sensor",
            CapabilityKind::Comm => "comm",
            CapabilityKind::Meta => "meta",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamType {
    Integer,
    Number,
    String,
    Boolean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub param_type: ParamType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub units: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Capability {
    pub verb: String,
    pub kind: CapabilityKind,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
    #[serde(default)]
    pub params: Vec<ParamSpec>,
}

fn default_confidence() -> f64 {
    AGENT_DEFAULT_CONFIDENCE
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentificationSource {
    LocalDb,
    Agent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifiedDevice {
    pub stable_key: String,
    pub name: String,
    pub source: IdentificationSource,
    /// Capabilities that survived the confidence threshold, before the
    /// global cap is applied.
    pub capabilities: Vec<Capability>,
}

/// One selected capability with enough context to emit a tool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCapability {
    pub device_key: String,
    pub device_name: String,
    pub capability: Capability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Identification {
    pub devices: Vec<IdentifiedDevice>,
    /// Global rank order, already truncated to the cap. Tool emission
    /// follows this order exactly.
    pub ranked: Vec<RankedCapability>,
    pub dropped_below_threshold: usize,
    pub dropped_over_cap: usize,
    pub unidentified: Vec<String>,
    pub db_version: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentifyConfig {
    pub confidence_threshold: f64,
    pub cap: usize,
}

impl Default for IdentifyConfig {
    fn default() -> Self {
        Self {
            confidence_threshold: DEFAULT_CONFIDENCE_THRESHOLD,
            cap: DEFAULT_CAP,
        }
    }
}

#[derive(Debug, Error)]
pub enum IdentifyError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("device database: {0}")]
    Db(String),
}

// ---------------------------------------------------------------------------
// Device database

#[derive(Debug, Clone, Deserialize)]
struct DbEntry {
    name: String,
    capabilities: Vec<Capability>,
}

/// Known-device lookup keyed by `vvvv:pppp`. The version string is a digest
/// of the database text, so manifests can pin exactly what they were built
/// against.
#[derive(Debug, Clone)]
pub struct DeviceDatabase {
    entries: BTreeMap<String, DbEntry>,
    pub version: String,
}

impl DeviceDatabase {
    pub fn from_json(text: &str) -> Result<Self, IdentifyError> {
        let entries: BTreeMap<String, DbEntry> =
            serde_json::from_str(text).map_err(|e| IdentifyError::Db(e.to_string()))?;
        Ok(Self {
            version: sha256_hex(text.as_bytes())[..12].to_string(),
            entries,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, IdentifyError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| IdentifyError::Db(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// The database shipped in the repo.
    pub fn builtin() -> Self {
        Self::from_json(crate::fixtures::DEVICE_DB).expect("embedded device db must parse")
    }

    pub fn lookup(&self, vendor_id: u16, product_id: u16) -> Option<(&str, &[Capability])> {
        self.entries
            .get(&format!("{vendor_id:04x}:{product_id:04x}"))
            .map(|e| (e.name.as_str(), e.capabilities.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Identification

fn hex_or_dashes(id: Option<u16>) -> String {
    id.map_or("----".to_string(), |v| format!("{v:04x}"))
}

fn parse_agent_identify(value: &Value) -> Option<(String, Vec<Capability>)> {
    let name = value["name"].as_str()?.to_string();
    let capabilities: Vec<Capability> =
        serde_json::from_value(value["capabilities"].clone()).ok()?;
    Some((name, capabilities))
}

async fn identify_via_agent(
    record: &crate::platform::DeviceRecord,
    agent: &dyn AgentPort,
    specs: &SpecSet,
    events: &mut Vec<LogEvent>,
) -> Result<Option<(String, Vec<Capability>)>, IdentifyError> {
    let spec = specs.get(Stage::Identify);
    let ctx = context(&[
        ("bus", record.bus.name()),
        ("vendor_id", &hex_or_dashes(record.vendor_id)),
        ("product_id", &hex_or_dashes(record.product_id)),
        ("description", &record.description),
        ("stable_key", &record.stable_key),
    ]);
    let rendered = render_prompt(spec, &ctx)?;
    let mut prompt = rendered.text;
    // One shot, then one corrective retry carrying the validation errors.
    for attempt in 0..2 {
        let response = match agent.complete(Purpose::IdentifyDevice, &prompt, &[]).await {
            Ok(v) => v,
            Err(e) => {
                events.push(LogEvent::new(
                    EventSource::Pipeline,
                    Severity::Warn,
                    format!("agent could not identify {}: {e}", record.stable_key),
                ));
                return Ok(None);
            }
        };
        let errors = validate_identify_v1(&response);
        if errors.is_empty() {
            if let Some(parsed) = parse_agent_identify(&response) {
                return Ok(Some(parsed));
            }
        }
        if attempt == 0 {
            prompt = format!(
                "{prompt}\n\nYour previous reply failed validation:\n{}\nReturn corrected JSON only.",
                errors
                    .iter()
                    .map(|e| format!("- {e}"))
                    .collect::<Vec<_>>()
                    .join("\n")
            );
        } else {
            events.push(LogEvent::new(
                EventSource::Pipeline,
                Severity::Warn,
                format!(
                    "agent identification of {} failed validation twice: {}",
                    record.stable_key,
                    errors.join("; ")
                ),
            ));
        }
    }
    Ok(None)
}

/// Identify every inventoried device and produce the capped global ranking.
pub async fn identify_inventory(
    inventory: &HardwareInventory,
    db: &DeviceDatabase,
    agent: &dyn AgentPort,
    specs: &SpecSet,
    config: &IdentifyConfig,
) -> Result<(Identification, Vec<LogEvent>), IdentifyError> {
    let mut events = Vec::new();
    let mut devices = Vec::new();
    let mut unidentified = Vec::new();
    let mut dropped_below_threshold = 0usize;

    for record in &inventory.devices {
        let db_hit = match (record.vendor_id, record.product_id) {
            (Some(v), Some(p)) => db.lookup(v, p),
            _ => None,
        };
        let (name, capabilities, source) = match db_hit {
            Some((name, caps)) => {
                let caps = caps
                    .iter()
                    .map(|c| Capability {
                        confidence: DB_CONFIDENCE,
                        ..c.clone()
                    })
                    .collect();
                (name.to_string(), caps, IdentificationSource::LocalDb)
            }
            None => match identify_via_agent(record, agent, specs, &mut events).await? {
                Some((name, caps)) => (name, caps, IdentificationSource::Agent),
                None => {
                    unidentified.push(record.stable_key.clone());
                    continue;
                }
            },
        };
        let total = capabilities.len();
        let kept: Vec<Capability> = capabilities
            .into_iter()
            .filter(|c| c.confidence >= config.confidence_threshold)
            .collect();
        dropped_below_threshold += total - kept.len();
        events.push(
            LogEvent::new(
                EventSource::Pipeline,
                Severity::Info,
                format!(
                    "identified {} as {name} ({} capabilities, via {})",
                    record.stable_key,
                    kept.len(),
                    match source {
                        IdentificationSource::LocalDb => "local db",
                        IdentificationSource::Agent => "agent",
                    }
                ),
            )
            .with("device", record.stable_key.as_str()),
        );
        devices.push(IdentifiedDevice {
            stable_key: record.stable_key.clone(),
            name,
            source,
            capabilities: kept,
        });
    }

    let mut ranked: Vec<RankedCapability> = devices
        .iter()
        .flat_map(|d| {
            d.capabilities.iter().map(|c| RankedCapability {
                device_key: d.stable_key.clone(),
                device_name: d.name.clone(),
                capability: c.clone(),
            })
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.capability
            .confidence
            .total_cmp(&a.capability.confidence)
            .then_with(|| a.capability.kind.rank().cmp(&b.capability.kind.rank()))
            .then_with(|| a.capability.verb.cmp(&b.capability.verb))
            .then_with(|| a.device_key.cmp(&b.device_key))
    });
    let dropped_over_cap = ranked.len().saturating_sub(config.cap);
    ranked.truncate(config.cap);
    if dropped_over_cap > 0 {
        events.push(LogEvent::new(
            EventSource::Pipeline,
            Severity::Warn,
            format!(
                "capability cap {} reached; dropped {dropped_over_cap} lower-ranked capabilities",
                config.cap
            ),
        ));
    }

    Ok((
        Identification {
            devices,
            ranked,
            dropped_below_threshold,
            dropped_over_cap,
            unidentified,
            db_version: db.version.clone(),
        },
        events,
    ))
}
