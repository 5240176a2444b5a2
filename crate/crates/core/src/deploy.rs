//! Deploy stage: resolve host-side dependencies, bring the endpoint up,
//! verify it answers for the manifest we built, and persist enough state to
//! rebuild everything after a restart.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use serde::{de::DeserializeOwned, Serialize};
use thiserror::Error;

use crate::events::{EventSource, LogEvent, Severity};
use crate::identify::Identification;
use crate::mcpserve::{McpClient, McpServer, ServeError};
use crate::platform::HardwareInventory;
use crate::simbus::DeviceBus;
use crate::toolgen::{Requirement, ToolManifest, ToolgenError};

pub const INVENTORY_FILE: &str = "inventory.json";
pub const IDENTIFICATION_FILE: &str = "identification.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PERCEPTS_FILE: &str = "percepts.json";

#[derive(Debug, Error)]
pub enum DeployError {
    #[error("unresolved dependencies: {}", .0.join(", "))]
    MissingDependencies(Vec<String>),
    #[error("install failed for {name}: {reason}")]
    Install { name: String, reason: String },
    #[error("endpoint verification failed: {0}")]
    Endpoint(String),
    #[error(transparent)]
    Serve(#[from] ServeError),
    #[error(transparent)]
    Manifest(#[from] ToolgenError),
    #[error("state io: {0}")]
    Io(#[from] std::io::Error),
    #[error("state decode: {0}")]
    Decode(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// Dependency preflight

/// Something that can satisfy a missing requirement on the host.
#[async_trait]
pub trait Installer: Send + Sync {
    async fn install(&self, requirement: &Requirement) -> Result<(), String>;
}

/// Test-bench installer: "installing" a dependency flips the corresponding
/// flag on the bus, the same way a package manager would put a shared
/// library or a CLI tool on the path.
pub struct StubInstaller {
    bus: Arc<dyn DeviceBus>,
    installed: Mutex<Vec<String>>,
}

impl StubInstaller {
    pub fn new(bus: Arc<dyn DeviceBus>) -> Self {
        Self {
            bus,
            installed: Mutex::new(Vec::new()),
        }
    }

    pub fn installed(&self) -> Vec<String> {
        self.installed.lock().expect("installed lock").clone()
    }
}

#[async_trait]
impl Installer for StubInstaller {
    async fn install(&self, requirement: &Requirement) -> Result<(), String> {
        self.bus.set_dependency(&requirement.name, true);
        self.installed
            .lock()
            .expect("installed lock")
            .push(requirement.name.clone());
        Ok(())
    }
}

/// Union of the requirements of every tool in the manifest, deduplicated.
pub fn manifest_requirements(manifest: &ToolManifest) -> Vec<Requirement> {
    let mut set = BTreeSet::new();
    for entry in &manifest.tools {
        for requirement in &entry.plan.required {
            set.insert(requirement.clone());
        }
    }
    set.into_iter().collect()
}

/// Requirements the host cannot satisfy right now.
pub fn missing_requirements(manifest: &ToolManifest, bus: &dyn DeviceBus) -> Vec<Requirement> {
    manifest_requirements(manifest)
        .into_iter()
        .filter(|r| !bus.has_dependency(&r.name))
        .collect()
}

/// Make every manifest requirement available, installing through `installer`
/// where one is given. With `skip` the check degrades to a warning so the
/// endpoint can come up anyway (the affected tools fail at call time).
pub async fn resolve_dependencies(
    manifest: &ToolManifest,
    bus: &dyn DeviceBus,
    installer: Option<&dyn Installer>,
    skip: bool,
    events: &mut Vec<LogEvent>,
) -> Result<Vec<String>, DeployError> {
    let missing = missing_requirements(manifest, bus);
    if missing.is_empty() {
        events.push(LogEvent::new(
            EventSource::Deploy,
            Severity::Info,
            "dependency preflight clean".to_string(),
        ));
        return Ok(Vec::new());
    }
    let names: Vec<String> = missing.iter().map(|r| r.name.clone()).collect();
    if skip {
        events.push(LogEvent::new(
            EventSource::Deploy,
            Severity::Warn,
            format!(
                "dependency preflight skipped with {} unresolved: {}",
                names.len(),
                names.join(", ")
            ),
        ));
        return Ok(Vec::new());
    }
    let Some(installer) = installer else {
        return Err(DeployError::MissingDependencies(names));
    };
    let mut installed = Vec::new();
    for requirement in &missing {
        installer
            .install(requirement)
            .await
            .map_err(|reason| DeployError::Install {
                name: requirement.name.clone(),
                reason,
            })?;
        if !bus.has_dependency(&requirement.name) {
            return Err(DeployError::Install {
                name: requirement.name.clone(),
                reason: "still unavailable after install".to_string(),
            });
        }
        events.push(LogEvent::new(
            EventSource::Deploy,
            Severity::Info,
            format!("installed dependency {}", requirement.name),
        ));
        installed.push(requirement.name.clone());
    }
    Ok(installed)
}

// ---------------------------------------------------------------------------
// State persistence

/// A directory of JSON files that survives restarts. The daemon reads these
/// back when it has to rebuild a corrupt manifest without re-probing.
#[derive(Debug, Clone)]
pub struct StateStore {
    dir: PathBuf,
}

impl StateStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    pub fn save_json<T: Serialize>(&self, file: &str, value: &T) -> Result<(), DeployError> {
        std::fs::create_dir_all(&self.dir)?;
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        std::fs::write(self.path(file), text)?;
        Ok(())
    }

    pub fn load_json<T: DeserializeOwned>(&self, file: &str) -> Result<T, DeployError> {
        let text = std::fs::read_to_string(self.path(file))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save_inventory(&self, inventory: &HardwareInventory) -> Result<(), DeployError> {
        self.save_json(INVENTORY_FILE, inventory)
    }

    pub fn load_inventory(&self) -> Result<HardwareInventory, DeployError> {
        self.load_json(INVENTORY_FILE)
    }

    pub fn save_identification(&self, identification: &Identification) -> Result<(), DeployError> {
        self.save_json(IDENTIFICATION_FILE, identification)
    }

    pub fn load_identification(&self) -> Result<Identification, DeployError> {
        self.load_json(IDENTIFICATION_FILE)
    }

    pub fn save_manifest(&self, manifest: &ToolManifest) -> Result<(), DeployError> {
        std::fs::create_dir_all(&self.dir)?;
        manifest.save(&self.path(MANIFEST_FILE))?;
        Ok(())
    }

    /// Loads and hash-verifies; a tampered file is an error, not a manifest.
    pub fn load_manifest(&self) -> Result<ToolManifest, DeployError> {
        Ok(ToolManifest::load(&self.path(MANIFEST_FILE))?)
    }
}

// ---------------------------------------------------------------------------
// Endpoint verification

/// Prove the endpoint serves the manifest we think it serves: health hash
/// matches, the handshake completes, and every tool is listed.
pub async fn verify_endpoint(
    base_url: &str,
    expected_hash: &str,
    expected_tools: usize,
) -> Result<(), DeployError> {
    let client = McpClient::new(base_url);
    let health = client
        .healthz()
        .await
        .map_err(|e| DeployError::Endpoint(format!("healthz: {e}")))?;
    if health["status"] != serde_json::json!("ok") {
        return Err(DeployError::Endpoint(format!(
            "healthz status {}",
            health["status"]
        )));
    }
    let served = health["manifest_hash"].as_str().unwrap_or_default();
    if served != expected_hash {
        return Err(DeployError::Endpoint(format!(
            "manifest hash mismatch: serving {served}, expected {expected_hash}"
        )));
    }
    client
        .initialize()
        .await
        .map_err(|e| DeployError::Endpoint(format!("initialize: {e}")))?;
    let tools = client
        .tools_list()
        .await
        .map_err(|e| DeployError::Endpoint(format!("tools/list: {e}")))?;
    if tools.len() != expected_tools {
        return Err(DeployError::Endpoint(format!(
            "tool count mismatch: listing {}, expected {expected_tools}",
            tools.len()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// The deploy stage itself

#[derive(Debug, Clone, Default)]
pub struct DeployConfig {
    /// 0 picks an ephemeral port.
    pub port: u16,
    pub skip_deps: bool,
    pub state_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct DeployReport {
    pub endpoint: String,
    pub manifest_hash: String,
    pub tool_count: usize,
    pub installed: Vec<String>,
}

/// Preflight, serve, verify, persist. Returns the live server so the caller
/// decides how long it stays up.
pub async fn deploy(
    manifest: ToolManifest,
    bus: Arc<dyn DeviceBus>,
    installer: Option<&dyn Installer>,
    config: &DeployConfig,
) -> Result<(McpServer, DeployReport, Vec<LogEvent>), DeployError> {
    let mut events = Vec::new();
    let installed = resolve_dependencies(
        &manifest,
        bus.as_ref(),
        installer,
        config.skip_deps,
        &mut events,
    )
    .await?;

    let manifest_hash = manifest.manifest_hash.clone();
    let tool_count = manifest.tools.len();
    if let Some(dir) = &config.state_dir {
        StateStore::new(dir).save_manifest(&manifest)?;
    }

    let server = McpServer::start(manifest, bus, config.port).await?;
    verify_endpoint(&server.url(), &manifest_hash, tool_count).await?;
    events.push(LogEvent::new(
        EventSource::Deploy,
        Severity::Info,
        format!(
            "endpoint verified at {} serving {} tools ({})",
            server.url(),
            tool_count,
            manifest_hash
        ),
    ));

    let report = DeployReport {
        endpoint: server.url(),
        manifest_hash,
        tool_count,
        installed,
    };
    Ok((server, report, events))
}
