//! The `up` orchestration: probe the bus, identify what answered, generate
//! the tool surface, and deploy it as a verified MCP endpoint — one call,
//! from cold hardware to live tools.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use thiserror::Error;

use crate::agentport::{agent_from_config, AgentError, AgentPort};
use crate::deploy::{
    deploy, DeployConfig, DeployError, DeployReport, Installer, StateStore, StubInstaller,
};
use crate::events::{EventSource, LogEvent, Severity};
use crate::identify::{
    identify_inventory, DeviceDatabase, Identification, IdentifyConfig, IdentifyError,
};
use crate::mcpserve::McpServer;
use crate::platform::{
    detect_platform, merge_inventory, parse_gpio_listing, parse_profiler_listing,
    parse_usb_listing, run_enumerators, DeviceRecord, Enumerator, EnumeratorRunner,
    HardwareInventory, PlatformDescriptor,
};
use crate::simbus::{BusError, DeviceBus, SimBus};
use crate::specs::{load_spec_set, SpecError, SpecSet};
use crate::toolgen::{build_manifest, ToolManifest, ToolgenError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Identify(#[from] IdentifyError),
    #[error(transparent)]
    Toolgen(#[from] ToolgenError),
    #[error(transparent)]
    Deploy(#[from] DeployError),
    #[error("rig: {0}")]
    Rig(#[from] BusError),
    #[error("identification produced no tools; nothing to serve")]
    NothingToServe,
    #[error("no bus driver for real hardware in this build; run with --simulate")]
    RealHardwareUnsupported,
}

/// Everything `up` needs to know, shared verbatim with the CLI flags.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub simulate: bool,
    /// Rig description for the simulated bus; embedded default when unset.
    pub rig: Option<PathBuf>,
    pub specs_dir: PathBuf,
    /// Device database path; embedded copy when unset.
    pub db: Option<PathBuf>,
    /// Agent kind: "stub" (default) or "remote".
    pub agent: String,
    /// Script file for the stub agent; embedded script when unset.
    pub agent_script: Option<PathBuf>,
    pub cap: usize,
    pub confidence_threshold: f64,
    pub port: u16,
    pub skip_deps: bool,
    pub state_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            simulate: true,
            rig: None,
            specs_dir: PathBuf::from("specs"),
            db: None,
            agent: "stub".to_string(),
            agent_script: None,
            cap: crate::identify::DEFAULT_CAP,
            confidence_threshold: crate::identify::DEFAULT_CONFIDENCE_THRESHOLD,
            port: 0,
            skip_deps: false,
            state_dir: None,
        }
    }
}

/// The live result of a completed bootstrap.
pub struct Bootstrap {
    pub platform: PlatformDescriptor,
    pub inventory: HardwareInventory,
    pub identification: Identification,
    pub manifest: ToolManifest,
    pub report: DeployReport,
    pub server: McpServer,
    pub bus: Arc<dyn DeviceBus>,
    pub sim: Option<Arc<SimBus>>,
    pub agent: Arc<dyn AgentPort>,
    pub specs: SpecSet,
    pub db: DeviceDatabase,
    pub identify_config: IdentifyConfig,
    pub installer: Arc<dyn Installer>,
    pub store: Option<StateStore>,
    pub events: Vec<LogEvent>,
}

fn stage_event(text: String) -> LogEvent {
    LogEvent::new(EventSource::Pipeline, Severity::Info, text)
}

/// Probe stage for a live (non-replay) host: run whatever enumerators the
/// platform offers and parse each listing with its own parser.
pub fn probe_host(platform: &PlatformDescriptor, events: &mut Vec<LogEvent>) -> HardwareInventory {
    let (outputs, mut probe_events) = run_enumerators(platform, None, &EnumeratorRunner::default());
    events.append(&mut probe_events);
    let mut parsed: Vec<(Enumerator, Vec<DeviceRecord>)> = Vec::new();
    for (enumerator, text) in &outputs {
        let (records, skipped) = match enumerator {
            Enumerator::UsbList | Enumerator::SimulatedBus => parse_usb_listing(text),
            Enumerator::SystemProfile => parse_profiler_listing(text),
            Enumerator::GpioDetect => parse_gpio_listing(text),
        };
        if skipped > 0 {
            events.push(LogEvent::new(
                EventSource::Pipeline,
                Severity::Warn,
                format!("{enumerator:?}: {skipped} unparseable line(s) skipped"),
            ));
        }
        parsed.push((*enumerator, records));
    }
    merge_inventory(platform, parsed)
}

/// Probe stage for the simulated bus: one enumerator, the virtual snapshot.
pub fn probe_simulated(bus: &SimBus, events: &mut Vec<LogEvent>) -> HardwareInventory {
    let platform = detect_platform(true);
    let listing = bus.snapshot_listing();
    let (records, skipped) = parse_usb_listing(&listing);
    debug_assert_eq!(skipped, 0, "the simulated bus emits only valid lines");
    events.push(stage_event(format!(
        "probed simulated rig '{}': {} device(s)",
        bus.rig_name(),
        records.len()
    )));
    merge_inventory(&platform, vec![(Enumerator::SimulatedBus, records)])
}

/// Run the whole pipeline and return the live endpoint.
pub async fn bootstrap(config: &PipelineConfig) -> Result<Bootstrap, PipelineError> {
    let mut events = Vec::new();

    // stage: load specs + agent + db
    let specs = load_spec_set(&config.specs_dir)?;
    let agent = agent_from_config(&config.agent, config.agent_script.as_deref())?;
    let db = match &config.db {
        Some(path) => DeviceDatabase::from_file(path)?,
        None => DeviceDatabase::builtin(),
    };

    // stage: probe
    if !config.simulate {
        // Identification and serving need a bus driver behind the inventory;
        // this build only ships the simulated one.
        return Err(PipelineError::RealHardwareUnsupported);
    }
    let sim = Arc::new(match &config.rig {
        Some(path) => SimBus::from_file(path)?,
        None => SimBus::from_json(crate::fixtures::RIG_DEFAULT)?,
    });
    let bus: Arc<dyn DeviceBus> = Arc::clone(&sim) as Arc<dyn DeviceBus>;
    let platform = detect_platform(true);
    let inventory = probe_simulated(&sim, &mut events);
    events.push(stage_event(format!(
        "inventory hash {}",
        inventory.inventory_hash
    )));

    // stage: identify
    let identify_config = IdentifyConfig {
        confidence_threshold: config.confidence_threshold,
        cap: config.cap,
    };
    let (identification, mut identify_events) =
        identify_inventory(&inventory, &db, agent.as_ref(), &specs, &identify_config).await?;
    events.append(&mut identify_events);
    events.push(stage_event(format!(
        "identified {} device(s), selected {} capabilit(ies)",
        identification.devices.len(),
        identification.ranked.len()
    )));

    // stage: interface
    let (manifest, mut toolgen_events) = build_manifest(
        &identification,
        &inventory.inventory_hash,
        agent.as_ref(),
        &specs,
    )
    .await?;
    events.append(&mut toolgen_events);
    if manifest.tools.is_empty() {
        return Err(PipelineError::NothingToServe);
    }
    events.push(stage_event(format!(
        "generated {} tool(s), manifest {}",
        manifest.tools.len(),
        manifest.manifest_hash
    )));

    // stage: deploy
    let installer: Arc<dyn Installer> = Arc::new(StubInstaller::new(Arc::clone(&bus)));
    let deploy_config = DeployConfig {
        port: config.port,
        skip_deps: config.skip_deps,
        state_dir: config.state_dir.clone(),
    };
    let (server, report, mut deploy_events) = deploy(
        manifest.clone(),
        Arc::clone(&bus),
        Some(installer.as_ref()),
        &deploy_config,
    )
    .await?;
    events.append(&mut deploy_events);

    // persist the rest of the state next to the manifest
    let store = config.state_dir.as_ref().map(StateStore::new);
    if let Some(store) = &store {
        store.save_inventory(&inventory)?;
        store.save_identification(&identification)?;
    }
    events.push(stage_event(format!(
        "up: serving {} tool(s) at {}",
        report.tool_count, report.endpoint
    )));

    Ok(Bootstrap {
        platform,
        inventory,
        identification,
        manifest,
        report,
        server,
        bus,
        sim: Some(sim),
        agent,
        specs,
        db,
        identify_config,
        installer,
        store,
        events,
    })
}

impl Bootstrap {
    /// Wire a daemon onto this bootstrap's endpoint.
    pub fn daemon_seed(&self, config: crate::daemon::DaemonConfig) -> crate::daemon::DaemonSeed {
        crate::daemon::DaemonSeed {
            state: Arc::clone(&self.server.state),
            endpoint: self.server.url(),
            bus: Arc::clone(&self.bus),
            agent: Arc::clone(&self.agent),
            specs: self.specs.clone(),
            db: self.db.clone(),
            identify_config: self.identify_config,
            platform: self.platform.clone(),
            store: self.store.clone(),
            installer: Some(Arc::clone(&self.installer)),
            config,
        }
    }
}

/// Replay probe used by tests and offline captures: parse pinned enumerator
/// outputs instead of executing anything.
pub fn probe_replay(
    platform: &PlatformDescriptor,
    fixtures: &BTreeMap<Enumerator, String>,
) -> HardwareInventory {
    let (outputs, _) = run_enumerators(platform, Some(fixtures), &EnumeratorRunner::default());
    let parsed = outputs
        .iter()
        .map(|(enumerator, text)| {
            let (records, _) = match enumerator {
                Enumerator::UsbList | Enumerator::SimulatedBus => parse_usb_listing(text),
                Enumerator::SystemProfile => parse_profiler_listing(text),
                Enumerator::GpioDetect => parse_gpio_listing(text),
            };
            (*enumerator, records)
        })
        .collect();
    merge_inventory(platform, parsed)
}
