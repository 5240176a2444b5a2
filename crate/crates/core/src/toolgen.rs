//! Interface generation: turn ranked capabilities into MCP tool specs with
//! JSON Schema inputs and agent-drafted handler plans, and seal the result
//! into a content-addressed manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::agentport::{validate_plan_v1, AgentPort, Purpose};
use crate::events::{now_rfc3339, EventSource, LogEvent, Severity};
use crate::identify::{CapabilityKind, Identification, ParamSpec, ParamType, RankedCapability};
use crate::specs::{context, render_prompt, SpecError, SpecSet, Stage};

/// Name of the builtin slot bound at manifest-build time rather than call
/// time.
pub const DEVICE_KEY_SLOT: &str = "device_key";
/// Current manifest format version.
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ToolgenError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("manifest: {0}")]
    Manifest(String),
}

// ---------------------------------------------------------------------------
// Plans

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum PlanStep {
    Open { bus: String, address: String },
    Write { template: String },
    Read { length: usize, timeout_ms: u64 },
    Expect { pattern: String },
    CaptureFrame { camera_key: String },
    GpioSet { line: String, value: String },
    Delay { ms: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Postcondition {
    /// After the plan runs, decode the final read and require it within
    /// `tolerance` of the commanded parameter.
    ReadbackWithin { param: String, tolerance: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequirementKind {
    RuntimeLibrary,
    SystemTool,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Requirement {
    pub name: String,
    pub kind: RequirementKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandlerPlan {
    pub steps: Vec<PlanStep>,
    pub postcondition: Option<Postcondition>,
    /// Host-side dependencies implied by the step kinds.
    pub required: Vec<Requirement>,
}

/// Dependencies follow from what the plan does, not from what it claims:
/// frame capture needs the camera backend, gpio writes need line access,
/// plain serial traffic needs nothing.
pub fn derive_requirements(steps: &[PlanStep]) -> Vec<Requirement> {
    let mut out = BTreeSet::new();
    for step in steps {
        match step {
            PlanStep::CaptureFrame { .. } => {
                out.insert(Requirement {
                    name: crate::simbus::DEP_CAMERA.to_string(),
                    kind: RequirementKind::RuntimeLibrary,
                });
            }
            PlanStep::GpioSet { .. } => {
                out.insert(Requirement {
                    name: crate::simbus::DEP_GPIO.to_string(),
                    kind: RequirementKind::SystemTool,
                });
            }
            _ => {}
        }
    }
    out.into_iter().collect()
}

pub(crate) fn slot_re() -> &'static regex::Regex {
    use std::sync::OnceLock;
    static RE: OnceLock<regex::Regex> = OnceLock::new();
    RE.get_or_init(|| regex::Regex::new(r"\{([a-z][a-z0-9_]*)\}").unwrap())
}

fn slots_in(text: &str) -> Vec<String> {
    slot_re()
        .captures_iter(text)
        .map(|c| c[1].to_string())
        .collect()
}

/// Every `{slot}` in a plan must name a declared parameter (directly or via
/// its `_lo`/`_hi` halves) or the builtin device key.
pub fn check_plan_slots(plan: &Value, params: &[ParamSpec]) -> Vec<String> {
    let declared: BTreeSet<&str> = params.iter().map(|p| p.name.as_str()).collect();
    let known = |slot: &str| {
        if slot == DEVICE_KEY_SLOT || declared.contains(slot) {
            return true;
        }
        slot.strip_suffix("_lo")
            .or_else(|| slot.strip_suffix("_hi"))
            .is_some_and(|base| declared.contains(base))
    };
    let mut errors = Vec::new();
    let Some(steps) = plan["steps"].as_array() else {
        return errors;
    };
    for (i, step) in steps.iter().enumerate() {
        for field in [
            "template",
            "pattern",
            "address",
            "camera_key",
            "line",
            "value",
        ] {
            if let Some(text) = step[field].as_str() {
                for slot in slots_in(text) {
                    if !known(&slot) {
                        errors.push(format!(
                            "steps[{i}].{field}: unknown parameter slot {{{slot}}}"
                        ));
                    }
                }
            }
        }
    }
    errors
}

/// Fill the builtin `{device_key}` slot. Runtime parameter slots survive
/// into the manifest and are bound per call.
fn bind_device_key(steps: &mut [PlanStep], device_key: &str) {
    let fill = |text: &mut String| {
        *text = text.replace(&format!("{{{DEVICE_KEY_SLOT}}}"), device_key);
    };
    for step in steps {
        match step {
            PlanStep::Open { address, .. } => fill(address),
            PlanStep::CaptureFrame { camera_key } => fill(camera_key),
            _ => {}
        }
    }
}

// ---------------------------------------------------------------------------
// Tool specs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub description: String,
    pub input_schema: Value,
    pub device_key: String,
    pub verb: String,
    pub kind: CapabilityKind,
    pub params: Vec<ParamSpec>,
}

fn schema_type(t: ParamType) -> &'static str {
    match t {
        ParamType::Integer => "integer",
        ParamType::Number => "number",
        ParamType::String => "string",
        ParamType::Boolean => "boolean",
    }
}

/// Whole-valued bounds render as JSON integers (`180`, not `180.0`).
fn schema_number(v: f64) -> Value {
    if v.is_finite() && v.fract() == 0.0 && v.abs() <= i64::MAX as f64 {
        json!(v as i64)
    } else {
        json!(v)
    }
}

/// JSON Schema for a tool's input object. All declared parameters are
/// required and nothing else is accepted.
pub fn input_schema(params: &[ParamSpec]) -> Value {
    let mut properties = serde_json::Map::new();
    let mut required = Vec::new();
    for p in params {
        let mut prop = serde_json::Map::new();
        prop.insert("type".to_string(), json!(schema_type(p.param_type)));
        if let Some(units) = &p.units {
            prop.insert("description".to_string(), json!(format!("units: {units}")));
        }
        if let Some(min) = p.min {
            prop.insert("minimum".to_string(), schema_number(min));
        }
        if let Some(max) = p.max {
            prop.insert("maximum".to_string(), schema_number(max));
        }
        properties.insert(p.name.clone(), Value::Object(prop));
        required.push(json!(p.name));
    }
    json!({
        "type": "object",
        "properties": properties,
        "required": required,
        "additionalProperties": false
    })
}

/// Collision policy: the first tool in rank order keeps the bare verb,
/// later ones get `_2`, `_3`, ...
fn tool_name(verb: &str, occurrence: usize) -> String {
    if occurrence == 0 {
        verb.to_string()
    } else {
        format!("{verb}_{}", occurrence + 1)
    }
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolEntry {
    pub tool: ToolSpec,
    pub plan: HandlerPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolManifest {
    pub version: u32,
    /// Provenance only — excluded from the manifest hash so identical
    /// inputs rebuild to the identical digest.
    pub created_at: String,
    pub inventory_hash: String,
    pub db_version: String,
    pub spec_hashes: BTreeMap<String, String>,
    pub tools: Vec<ToolEntry>,
    pub manifest_hash: String,
}

impl ToolManifest {
    /// Digest over everything except `created_at` and the hash field
    /// itself.
    pub fn compute_hash(&self) -> String {
        let mut clone = self.clone();
        clone.manifest_hash = String::new();
        clone.created_at = String::new();
        crate::hashing::canonical_hash(&clone).expect("manifest always serializes")
    }

    pub fn seal(mut self) -> Self {
        self.manifest_hash = self.compute_hash();
        self
    }

    pub fn verify_hash(&self) -> bool {
        self.compute_hash() == self.manifest_hash
    }

    pub fn tool(&self, name: &str) -> Option<&ToolEntry> {
        self.tools.iter().find(|t| t.tool.name == name)
    }

    pub fn save(&self, path: &Path) -> Result<(), ToolgenError> {
        let bytes = crate::hashing::canonical_bytes(self)
            .map_err(|e| ToolgenError::Manifest(e.to_string()))?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| ToolgenError::Manifest(format!("{}: {e}", parent.display())))?;
        }
        std::fs::write(path, bytes)
            .map_err(|e| ToolgenError::Manifest(format!("{}: {e}", path.display())))
    }

    /// Load and hash-verify. A file whose contents no longer match its
    /// sealed digest is treated as corrupt, not as a manifest.
    pub fn load(path: &Path) -> Result<Self, ToolgenError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ToolgenError::Manifest(format!("{}: {e}", path.display())))?;
        let manifest: Self =
            serde_json::from_str(&text).map_err(|e| ToolgenError::Manifest(e.to_string()))?;
        if !manifest.verify_hash() {
            return Err(ToolgenError::Manifest(format!(
                "manifest hash check failed for {}",
                path.display()
            )));
        }
        Ok(manifest)
    }
}

/// Draft one handler plan through the agent, with a single corrective
/// retry when validation fails. `purpose` distinguishes first drafts from
/// heal-time redrafts; `failure_context` feeds the heal prompt.
#[allow(clippy::too_many_arguments)]
pub async fn draft_plan(
    agent: &dyn AgentPort,
    specs: &SpecSet,
    purpose: Purpose,
    tool_name: &str,
    device_key: &str,
    device_description: &str,
    params: &[ParamSpec],
    failure_context: Option<&str>,
) -> Result<Result<HandlerPlan, Vec<String>>, ToolgenError> {
    let stage = match purpose {
        Purpose::HealPlan => Stage::Heal,
        _ => Stage::Serve,
    };
    let spec = specs.get(stage);
    let params_json = serde_json::to_string(params).expect("param specs always serialize");
    let mut last_errors = vec!["agent returned nothing".to_string()];
    for attempt in 0..2 {
        let errors_text = if attempt == 0 {
            "none".to_string()
        } else {
            last_errors.join("; ")
        };
        let mut ctx = context(&[
            ("tool_name", tool_name),
            ("device_key", device_key),
            ("device_description", device_description),
            ("params", &params_json),
            ("validation_errors", &errors_text),
        ]);
        if stage == Stage::Heal {
            ctx.insert(
                "failure_context".to_string(),
                failure_context.unwrap_or("none recorded").to_string(),
            );
        }
        let prompt = render_prompt(spec, &ctx)?.text;
        let response = match agent.complete(purpose, &prompt, &[]).await {
            Ok(v) => v,
            Err(e) => {
                last_errors = vec![e.to_string()];
                continue;
            }
        };
        let mut errors = validate_plan_v1(&response);
        errors.extend(check_plan_slots(&response, params));
        if errors.is_empty() {
            let steps: Vec<PlanStep> = serde_json::from_value(response["steps"].clone())
                .expect("validated steps must deserialize");
            let postcondition: Option<Postcondition> =
                serde_json::from_value(response["postcondition"].clone())
                    .expect("validated postcondition must deserialize");
            let mut steps = steps;
            bind_device_key(&mut steps, device_key);
            let required = derive_requirements(&steps);
            return Ok(Ok(HandlerPlan {
                steps,
                postcondition,
                required,
            }));
        }
        last_errors = errors;
    }
    Ok(Err(last_errors))
}

/// Build the full tool manifest for an identification, in rank order.
/// Capabilities whose plan cannot be drafted are skipped with a warning,
/// never silently.
pub async fn build_manifest(
    identification: &Identification,
    inventory_hash: &str,
    agent: &dyn AgentPort,
    specs: &SpecSet,
) -> Result<(ToolManifest, Vec<LogEvent>), ToolgenError> {
    let mut events = Vec::new();
    let mut tools: Vec<ToolEntry> = Vec::new();
    let mut occurrences: BTreeMap<&str, usize> = BTreeMap::new();

    for ranked in &identification.ranked {
        let RankedCapability {
            device_key,
            device_name,
            capability,
        } = ranked;
        let occurrence = occurrences.entry(capability.verb.as_str()).or_insert(0);
        let name = tool_name(&capability.verb, *occurrence);
        match draft_plan(
            agent,
            specs,
            Purpose::DraftPlan,
            &name,
            device_key,
            device_name,
            &capability.params,
            None,
        )
        .await?
        {
            Ok(plan) => {
                *occurrence += 1;
                events.push(
                    LogEvent::new(
                        EventSource::Pipeline,
                        Severity::Info,
                        format!("generated tool {name} for {device_key}"),
                    )
                    .with("tool", name.as_str()),
                );
                tools.push(ToolEntry {
                    tool: ToolSpec {
                        name,
                        description: format!("{} on {device_name} ({device_key})", capability.verb),
                        input_schema: input_schema(&capability.params),
                        device_key: device_key.clone(),
                        verb: capability.verb.clone(),
                        kind: capability.kind,
                        params: capability.params.clone(),
                    },
                    plan,
                });
            }
            Err(errors) => {
                events.push(LogEvent::new(
                    EventSource::Pipeline,
                    Severity::Warn,
                    format!(
                        "skipped tool {name} for {device_key}: {}",
                        errors.join("; ")
                    ),
                ));
            }
        }
    }

    let manifest = ToolManifest {
        version: MANIFEST_VERSION,
        created_at: now_rfc3339(),
        inventory_hash: inventory_hash.to_string(),
        db_version: identification.db_version.clone(),
        spec_hashes: specs.hashes(),
        tools,
        manifest_hash: String::new(),
    }
    .seal();
    Ok((manifest, events))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agentport::StubAgent;
    use crate::identify::{identify_inventory, Capability, DeviceDatabase, IdentifyConfig};
    use crate::platform::{merge_inventory, parse_usb_listing, Enumerator};
    use crate::simbus::{DeviceBus, SimBus};

    fn specs() -> SpecSet {
        let dir = tempfile::TempDir::new().unwrap();
        crate::fixtures::materialize_specs(dir.path()).unwrap();
        crate::specs::load_spec_set(dir.path()).unwrap()
    }

    async fn manifest_for(rig: &str, cap: usize) -> (ToolManifest, Vec<LogEvent>) {
        let bus = SimBus::from_json(rig).unwrap();
        let (records, _) = parse_usb_listing(&bus.snapshot_listing());
        let inventory = merge_inventory(
            &crate::platform::detect_platform(true),
            vec![(Enumerator::SimulatedBus, records)],
        );
        let agent = StubAgent::builtin();
        let specs = specs();
        let (id, _) = identify_inventory(
            &inventory,
            &DeviceDatabase::builtin(),
            &agent,
            &specs,
            &IdentifyConfig {
                cap,
                ..IdentifyConfig::default()
            },
        )
        .await
        .unwrap();
        build_manifest(&id, &inventory.inventory_hash, &agent, &specs)
            .await
            .unwrap()
    }

    #[tokio::test]
    async fn default_rig_yields_eighteen_uniquely_named_tools() {
        let (manifest, _) = manifest_for(crate::fixtures::RIG_DEFAULT, 30).await;
        assert_eq!(manifest.tools.len(), 18);
        let names: BTreeSet<&str> = manifest
            .tools
            .iter()
            .map(|t| t.tool.name.as_str())
            .collect();
        assert_eq!(names.len(), 18, "tool names must be unique");
        assert!(names.contains("set_servo_angle"));
        assert!(names.contains("capture_image"));
        assert!(names.contains("clear_all_gpio"));
        assert!(manifest.verify_hash());
    }

    #[tokio::test]
    async fn collisions_get_rank_ordered_suffixes() {
        let (manifest, _) = manifest_for(crate::fixtures::RIG_CAP40, 30).await;
        assert_eq!(manifest.tools.len(), 30);
        let centers: Vec<(&str, &str)> = manifest
            .tools
            .iter()
            .filter(|t| t.tool.verb == "center_servo")
            .map(|t| (t.tool.name.as_str(), t.tool.device_key.as_str()))
            .collect();
        assert_eq!(
            centers,
            vec![
                ("center_servo", "usb:2f24:a101:0"),
                ("center_servo_2", "usb:2f24:a101:1"),
                ("center_servo_3", "usb:2f24:a101:2"),
                ("center_servo_4", "usb:2f24:a101:3"),
            ]
        );
        let statuses: Vec<&str> = manifest
            .tools
            .iter()
            .filter(|t| t.tool.verb == "read_servo_status")
            .map(|t| t.tool.name.as_str())
            .collect();
        assert_eq!(statuses, vec!["read_servo_status", "read_servo_status_2"]);
    }

    #[tokio::test]
    async fn set_servo_angle_schema_is_frozen() {
        let (manifest, _) = manifest_for(crate::fixtures::RIG_DEFAULT, 30).await;
        let tool = &manifest.tool("set_servo_angle").unwrap().tool;
        assert_eq!(
            tool.input_schema,
            json!({
                "type": "object",
                "properties": {
                    "joint": {"type": "integer", "minimum": 1, "maximum": 6},
                    "angle": {
                        "type": "number",
                        "description": "units: deg",
                        "minimum": -180,
                        "maximum": 180
                    }
                },
                "required": ["joint", "angle"],
                "additionalProperties": false
            })
        );
        assert_eq!(
            tool.description,
            "set_servo_angle on Virtual 6-DOF Servo Controller (usb:2f24:a101:0)"
        );
    }

    #[tokio::test]
    async fn device_key_slot_is_bound_at_build_time() {
        let (manifest, _) = manifest_for(crate::fixtures::RIG_DEFAULT, 30).await;
        for entry in &manifest.tools {
            for step in &entry.plan.steps {
                match step {
                    PlanStep::Open { address, .. } => {
                        assert_eq!(address, &entry.tool.device_key);
                    }
                    PlanStep::CaptureFrame { camera_key } => {
                        assert_eq!(camera_key, &entry.tool.device_key);
                    }
                    _ => {}
                }
            }
        }
    }

    #[tokio::test]
    async fn requirements_follow_step_kinds() {
        let (manifest, _) = manifest_for(crate::fixtures::RIG_DEFAULT, 30).await;
        let required = |name: &str| manifest.tool(name).unwrap().plan.required.clone();
        assert_eq!(
            required("capture_image"),
            vec![Requirement {
                name: "cam_backend".to_string(),
                kind: RequirementKind::RuntimeLibrary
            }]
        );
        assert_eq!(
            required("set_gpio_line"),
            vec![Requirement {
                name: "gpio_access".to_string(),
                kind: RequirementKind::SystemTool
            }]
        );
        assert_eq!(required("set_servo_angle"), vec![]);
        assert_eq!(required("ping_controller"), vec![]);
    }

    #[tokio::test]
    async fn manifest_hash_covers_content_not_provenance() {
        let (a, _) = manifest_for(crate::fixtures::RIG_DEFAULT, 30).await;
        let (b, _) = manifest_for(crate::fixtures::RIG_DEFAULT, 30).await;
        assert_eq!(a.manifest_hash, b.manifest_hash);
        let mut tampered = a.clone();
        tampered.tools[0].tool.name = "renamed".to_string();
        assert!(!tampered.verify_hash());
        let mut redated = a.clone();
        redated.created_at = "2031-01-01T00:00:00Z".to_string();
        assert!(redated.verify_hash(), "created_at must not affect the hash");
    }

    #[tokio::test]
    async fn manifest_roundtrips_through_disk() {
        let (manifest, _) = manifest_for(crate::fixtures::RIG_DEFAULT, 30).await;
        let tmp = tempfile::TempDir::new().unwrap();
        let path = tmp.path().join("state/manifest.json");
        manifest.save(&path).unwrap();
        let loaded = ToolManifest::load(&path).unwrap();
        assert_eq!(loaded, manifest);
        assert!(loaded.verify_hash());
    }

    #[tokio::test]
    async fn undraftable_capability_is_skipped_with_a_warning() {
        let id = Identification {
            devices: vec![],
            ranked: vec![RankedCapability {
                device_key: "usb:dead:beef:0".to_string(),
                device_name: "Mystery".to_string(),
                capability: Capability {
                    verb: "warp_drive".to_string(),
                    kind: CapabilityKind::Actuator,
                    confidence: 0.95,
                    params: vec![],
                },
            }],
            dropped_below_threshold: 0,
            dropped_over_cap: 0,
            unidentified: vec![],
            db_version: "test".to_string(),
        };
        let agent = StubAgent::builtin();
        let (manifest, events) = build_manifest(&id, "h", &agent, &specs()).await.unwrap();
        assert!(manifest.tools.is_empty());
        assert!(events
            .iter()
            .any(|e| e.severity == Severity::Warn && e.text.contains("warp_drive")));
    }

    #[test]
    fn slot_checker_accepts_declared_and_builtin_slots() {
        let params = vec![ParamSpec {
            name: "angle".to_string(),
            param_type: ParamType::Number,
            units: None,
            min: None,
            max: None,
        }];
        let good = json!({"steps": [
            {"op": "open", "bus": "usb", "address": "{device_key}"},
            {"op": "write", "template": "FA AF 01 01 {angle_lo} {angle_hi} CK"}
        ]});
        assert!(check_plan_slots(&good, &params).is_empty());
        let bad = json!({"steps": [
            {"op": "write", "template": "FA AF {joint} 01 CK"}
        ]});
        assert_eq!(
            check_plan_slots(&bad, &params),
            vec!["steps[0].template: unknown parameter slot {joint}"]
        );
    }

    #[tokio::test]
    async fn spec_hashes_pin_all_eight_stages() {
        let (manifest, _) = manifest_for(crate::fixtures::RIG_DEFAULT, 30).await;
        let stages: Vec<&str> = manifest.spec_hashes.keys().map(String::as_str).collect();
        assert_eq!(
            stages,
            vec![
                "deploy",
                "heal",
                "identify",
                "interface",
                "perceive",
                "probe",
                "serve",
                "watch"
            ]
        );
    }
}
