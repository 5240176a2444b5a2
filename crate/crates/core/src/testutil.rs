//! Shared fixtures for module tests: a fully identified simulated rig with
//! its manifest, built the same way the pipeline builds one.

use std::sync::Arc;

use crate::agentport::StubAgent;
use crate::identify::{identify_inventory, DeviceDatabase, Identification, IdentifyConfig};
use crate::platform::{
    detect_platform, merge_inventory, parse_usb_listing, Enumerator, HardwareInventory,
};
use crate::simbus::{DeviceBus, SimBus};
use crate::specs::SpecSet;
use crate::toolgen::{build_manifest, ToolManifest};

pub(crate) struct RigFixture {
    pub bus: Arc<SimBus>,
    pub inventory: HardwareInventory,
    pub identification: Identification,
    pub manifest: ToolManifest,
    pub specs: SpecSet,
    pub agent: Arc<StubAgent>,
}

pub(crate) async fn rig_fixture() -> RigFixture {
    let bus = Arc::new(SimBus::from_json(crate::fixtures::RIG_DEFAULT).unwrap());
    let (records, _) = parse_usb_listing(&bus.snapshot_listing());
    let inventory = merge_inventory(
        &detect_platform(true),
        vec![(Enumerator::SimulatedBus, records)],
    );
    let dir = tempfile::TempDir::new().unwrap();
    crate::fixtures::materialize_specs(dir.path()).unwrap();
    let specs = crate::specs::load_spec_set(dir.path()).unwrap();
    let agent = Arc::new(StubAgent::builtin());
    let (identification, _) = identify_inventory(
        &inventory,
        &DeviceDatabase::builtin(),
        agent.as_ref(),
        &specs,
        &IdentifyConfig::default(),
    )
    .await
    .unwrap();
    let (manifest, _) = build_manifest(
        &identification,
        &inventory.inventory_hash,
        agent.as_ref(),
        &specs,
    )
    .await
    .unwrap();
    RigFixture {
        bus,
        inventory,
        identification,
        manifest,
        specs,
        agent,
    }
}
