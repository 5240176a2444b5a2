//! Embedded copies of the repository fixtures.
//!
//! The canonical files live at the repository root (`specs/`, `db/`,
//! `fixtures/`); these copies let the library run without a checkout and let
//! tests materialize a working tree into a temp directory.

use std::path::Path;

use crate::specs::Stage;

pub const SPEC_PROBE: &str = include_str!("../../../specs/probe.md");
pub const SPEC_IDENTIFY: &str = include_str!("../../../specs/identify.md");
pub const SPEC_INTERFACE: &str = include_str!("../../../specs/interface.md");
pub const SPEC_SERVE: &str = include_str!("../../../specs/serve.md");
pub const SPEC_DEPLOY: &str = include_str!("../../../specs/deploy.md");
pub const SPEC_WATCH: &str = include_str!("../../../specs/watch.md");
pub const SPEC_HEAL: &str = include_str!("../../../specs/heal.md");
pub const SPEC_PERCEIVE: &str = include_str!("../../../specs/perceive.md");

pub const DEVICE_DB: &str = include_str!("../../../db/devices.json");
pub const AGENT_SCRIPT: &str = include_str!("../../../fixtures/agent_script.json");
pub const RIG_DEFAULT: &str = include_str!("../../../fixtures/rig_default.json");
pub const RIG_CAP40: &str = include_str!("../../../fixtures/rig_cap40.json");

pub const LSUSB_LINUX: &str = include_str!("../../../fixtures/enumerators/linux/lsusb.txt");
pub const GPIODETECT_LINUX: &str =
    include_str!("../../../fixtures/enumerators/linux/gpiodetect.txt");
pub const PROFILER_MACOS: &str =
    include_str!("../../../fixtures/enumerators/macos/system_profiler.txt");

/// Built-in body for a stage spec, used when the file is absent.
pub fn default_spec_body(stage: Stage) -> &'static str {
    match stage {
        Stage::Probe => SPEC_PROBE,
        Stage::Identify => SPEC_IDENTIFY,
        Stage::Interface => SPEC_INTERFACE,
        Stage::Serve => SPEC_SERVE,
        Stage::Deploy => SPEC_DEPLOY,
        Stage::Watch => SPEC_WATCH,
        Stage::Heal => SPEC_HEAL,
        Stage::Perceive => SPEC_PERCEIVE,
    }
}

/// Write the eight default spec files into `dir`.
pub fn materialize_specs(dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    for stage in Stage::ALL {
        std::fs::write(dir.join(format!("{stage}.md")), default_spec_body(stage))?;
    }
    Ok(())
}
