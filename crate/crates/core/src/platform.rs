//! Host probing: platform detection, enumerator execution or replay, listing
//! parsers, and inventory merge.
//!
//! Parsers are total: arbitrary input never aborts, non-matching lines are
//! skipped and counted. A failed enumerator degrades to empty output plus a
//! warning event; the probe stage never aborts the pipeline.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{now_rfc3339, EventSource, LogEvent, Severity};
use crate::hashing::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OsFamily {
    Linux,
    Macos,
    WindowsWsl,
    Simulated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    X86_64,
    Aarch64,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Enumerator {
    UsbList,
    SystemProfile,
    GpioDetect,
    SimulatedBus,
}

impl Enumerator {
    /// Dedup priority at merge time; lower wins.
    fn priority(self) -> u8 {
        match self {
            Enumerator::UsbList => 0,
            Enumerator::SystemProfile => 1,
            Enumerator::GpioDetect => 2,
            Enumerator::SimulatedBus => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatformDescriptor {
    pub os_family: OsFamily,
    pub arch: Arch,
    pub available_enumerators: BTreeSet<Enumerator>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BusKind {
    Usb,
    Gpio,
    I2c,
    Virtual,
}

impl BusKind {
    pub fn name(self) -> &'static str {
        match self {
            BusKind::Usb => "usb",
            BusKind::Gpio => "gpio",
            BusKind::I2c => "i2c",
            BusKind::Virtual => "virtual",
        }
    }
}

/// One enumerated device. `source_line` keeps the raw enumerator text for
/// audit; `stable_key` is the canonical identity used everywhere downstream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceRecord {
    pub bus: BusKind,
    pub vendor_id: Option<u16>,
    pub product_id: Option<u16>,
    pub serial: Option<String>,
    pub description: String,
    pub source_line: String,
    pub stable_key: String,
    /// GPIO chips report their line count; other buses leave this unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gpio_lines: Option<u32>,
}

/// Canonical `<bus>:<vendor>:<product>:<serial-or-index>` key. Absent vendor
/// or product ids render as `----` so the field positions stay fixed.
pub fn stable_key(bus: BusKind, vid: Option<u16>, pid: Option<u16>, tail: &str) -> String {
    let v = vid.map_or("----".to_string(), |v| format!("{v:04x}"));
    let p = pid.map_or("----".to_string(), |p| format!("{p:04x}"));
    format!("{}:{}:{}:{}", bus.name(), v, p, tail)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareInventory {
    pub taken_at: String,
    pub platform: PlatformDescriptor,
    pub devices: Vec<DeviceRecord>,
    pub inventory_hash: String,
}

impl HardwareInventory {
    /// Digest over the sorted stable keys, independent of record order and of
    /// when the probe ran.
    pub fn compute_hash(devices: &[DeviceRecord]) -> String {
        let mut keys: Vec<&str> = devices.iter().map(|d| d.stable_key.as_str()).collect();
        keys.sort_unstable();
        sha256_hex(keys.join("\n").as_bytes())
    }

    pub fn verify_hash(&self) -> bool {
        Self::compute_hash(&self.devices) == self.inventory_hash
    }

    pub fn save(&self, path: &Path) -> Result<(), PlatformError> {
        let bytes = crate::hashing::canonical_bytes(self).map_err(PlatformError::Serialize)?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| PlatformError::io(path, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| PlatformError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, PlatformError> {
        let text = std::fs::read_to_string(path).map_err(|e| PlatformError::io(path, e))?;
        let inv: Self = serde_json::from_str(&text).map_err(PlatformError::Serialize)?;
        Ok(inv)
    }
}

#[derive(Debug, Error)]
pub enum PlatformError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization: {0}")]
    Serialize(#[source] serde_json::Error),
}

impl PlatformError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        PlatformError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

// ---------------------------------------------------------------------------
// Platform detection

fn host_arch() -> Arch {
    match std::env::consts::ARCH {
        "x86_64" => Arch::X86_64,
        "aarch64" => Arch::Aarch64,
        _ => Arch::Other,
    }
}

fn host_os_family() -> OsFamily {
    if cfg!(target_os = "macos") {
        return OsFamily::Macos;
    }
    if cfg!(target_os = "linux") {
        let version = std::fs::read_to_string("/proc/version").unwrap_or_default();
        if version.to_lowercase().contains("microsoft") {
            return OsFamily::WindowsWsl;
        }
        return OsFamily::Linux;
    }
    // Best effort for hosts we do not recognize; the enumerator probe will
    // come back empty and the pipeline proceeds with zero devices.
    tracing::warn!("unrecognized host OS; proceeding with empty enumerator set");
    OsFamily::Linux
}

/// Which enumerator tools are reachable through `path_var` for `os`.
pub fn available_enumerators_from_path(os: OsFamily, path_var: &str) -> BTreeSet<Enumerator> {
    let mut found = BTreeSet::new();
    let tool_present = |name: &str| {
        std::env::split_paths(path_var.as_ref() as &std::ffi::OsStr)
            .any(|dir| is_executable(&dir.join(name)))
    };
    match os {
        OsFamily::Simulated => {
            found.insert(Enumerator::SimulatedBus);
        }
        OsFamily::Macos => {
            if tool_present("system_profiler") {
                found.insert(Enumerator::SystemProfile);
            }
        }
        OsFamily::Linux | OsFamily::WindowsWsl => {
            if tool_present("lsusb") {
                found.insert(Enumerator::UsbList);
            }
            if tool_present("gpiodetect") {
                found.insert(Enumerator::GpioDetect);
            }
        }
    }
    found
}

fn is_executable(path: &Path) -> bool {
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        path.metadata()
            .map(|m| m.is_file() && m.permissions().mode() & 0o111 != 0)
            .unwrap_or(false)
    }
    #[cfg(not(unix))]
    {
        path.is_file()
    }
}

/// Detect the host platform. `simulate` forces the simulated descriptor,
/// whose only enumerator is the virtual bus snapshot.
pub fn detect_platform(simulate: bool) -> PlatformDescriptor {
    if simulate {
        return PlatformDescriptor {
            os_family: OsFamily::Simulated,
            arch: host_arch(),
            available_enumerators: BTreeSet::from([Enumerator::SimulatedBus]),
        };
    }
    let os_family = host_os_family();
    let path_var = std::env::var("PATH").unwrap_or_default();
    PlatformDescriptor {
        os_family,
        arch: host_arch(),
        available_enumerators: available_enumerators_from_path(os_family, &path_var),
    }
}

// ---------------------------------------------------------------------------
// Enumerator execution

/// Command table for the real enumerators; overridable for fault-injection
/// tests.
#[derive(Debug, Clone)]
pub struct EnumeratorRunner {
    pub commands: BTreeMap<Enumerator, Vec<String>>,
}

impl Default for EnumeratorRunner {
    fn default() -> Self {
        let mut commands = BTreeMap::new();
        commands.insert(Enumerator::UsbList, vec!["lsusb".to_string()]);
        commands.insert(
            Enumerator::SystemProfile,
            vec!["system_profiler".to_string(), "SPUSBDataType".to_string()],
        );
        commands.insert(Enumerator::GpioDetect, vec!["gpiodetect".to_string()]);
        Self { commands }
    }
}

/// Run (or replay) every available enumerator.
///
/// With `replay` set, no external command executes: each replayed enumerator
/// returns its fixture text and the rest are omitted. A failing command
/// yields empty output plus a warning event, never an error.
pub fn run_enumerators(
    platform: &PlatformDescriptor,
    replay: Option<&BTreeMap<Enumerator, String>>,
    runner: &EnumeratorRunner,
) -> (BTreeMap<Enumerator, String>, Vec<LogEvent>) {
    let mut outputs = BTreeMap::new();
    let mut events = Vec::new();
    for &enumerator in &platform.available_enumerators {
        if let Some(fixtures) = replay {
            if let Some(text) = fixtures.get(&enumerator) {
                outputs.insert(enumerator, text.clone());
            }
            continue;
        }
        let Some(argv) = runner.commands.get(&enumerator) else {
            events.push(LogEvent::new(
                EventSource::Pipeline,
                Severity::Warn,
                format!("no command configured for enumerator {enumerator:?}"),
            ));
            outputs.insert(enumerator, String::new());
            continue;
        };
        let result = std::process::Command::new(&argv[0])
            .args(&argv[1..])
            .output();
        match result {
            Ok(out) if out.status.success() => {
                outputs.insert(
                    enumerator,
                    String::from_utf8_lossy(&out.stdout).into_owned(),
                );
            }
            Ok(out) => {
                events.push(LogEvent::new(
                    EventSource::Pipeline,
                    Severity::Warn,
                    format!("enumerator {:?} exited with {}", enumerator, out.status),
                ));
                outputs.insert(enumerator, String::new());
            }
            Err(e) => {
                events.push(LogEvent::new(
                    EventSource::Pipeline,
                    Severity::Warn,
                    format!("enumerator {enumerator:?} failed to run: {e}"),
                ));
                outputs.insert(enumerator, String::new());
            }
        }
    }
    (outputs, events)
}

// ---------------------------------------------------------------------------
// Parsers

/// Assigns the `<serial-or-index>` tail: serial when present, else the
/// per-(bus, vendor, product) occurrence index within one listing.
struct KeyAllocator {
    seen: BTreeMap<(BusKind, Option<u16>, Option<u16>), u32>,
}

impl KeyAllocator {
    fn new() -> Self {
        Self {
            seen: BTreeMap::new(),
        }
    }

    fn key(
        &mut self,
        bus: BusKind,
        vid: Option<u16>,
        pid: Option<u16>,
        serial: Option<&str>,
    ) -> String {
        let ordinal = self.seen.entry((bus, vid, pid)).or_insert(0);
        let tail = match serial {
            Some(s) => s.to_string(),
            None => ordinal.to_string(),
        };
        *ordinal += 1;
        stable_key(bus, vid, pid, &tail)
    }
}

fn usb_line_re() -> &'static regex::Regex {
    use std::sync::OnceLock;
    static RE: OnceLock<regex::Regex> = OnceLock::new();
    RE.get_or_init(|| {
        regex::Regex::new(
            r"^Bus (\d{3}) Device (\d{3}): ID ([0-9a-fA-F]{4}):([0-9a-fA-F]{4})\s*(.*)$",
        )
        .unwrap()
    })
}

/// Parse `Bus DDD Device DDD: ID vvvv:pppp <description>` lines.
///
/// Returns the records plus the count of non-blank lines that did not match.
pub fn parse_usb_listing(text: &str) -> (Vec<DeviceRecord>, usize) {
    let re = usb_line_re();
    let mut records = Vec::new();
    let mut skipped = 0;
    let mut keys = KeyAllocator::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let Some(caps) = re.captures(line) else {
            skipped += 1;
            continue;
        };
        // The regex guarantees 4 hex digits, so these parses cannot fail.
        let vid = u16::from_str_radix(&caps[3], 16).ok();
        let pid = u16::from_str_radix(&caps[4], 16).ok();
        let description = caps[5].trim().to_string();
        records.push(DeviceRecord {
            bus: BusKind::Usb,
            vendor_id: vid,
            product_id: pid,
            serial: None,
            description,
            source_line: line.to_string(),
            stable_key: keys.key(BusKind::Usb, vid, pid, None),
            gpio_lines: None,
        });
    }
    (records, skipped)
}

fn parse_profiler_hex(value: &str) -> Option<u16> {
    let token = value.split_whitespace().next()?;
    let digits = token.strip_prefix("0x")?;
    u16::from_str_radix(digits, 16).ok()
}

/// Parse the indented key/value tree emitted by the macOS system profiler.
///
/// A section header is a line ending in `:` with no value; sections with both
/// `Product ID:` and `Vendor ID:` keys become USB records.
pub fn parse_profiler_listing(text: &str) -> (Vec<DeviceRecord>, usize) {
    struct Section {
        name: String,
        header_line: String,
        vid: Option<u16>,
        pid: Option<u16>,
        serial: Option<String>,
    }

    let mut records = Vec::new();
    let mut skipped = 0;
    let mut keys = KeyAllocator::new();
    let mut current: Option<Section> = None;

    let flush =
        |section: Option<Section>, records: &mut Vec<DeviceRecord>, keys: &mut KeyAllocator| {
            if let Some(s) = section {
                if s.vid.is_some() && s.pid.is_some() {
                    records.push(DeviceRecord {
                        bus: BusKind::Usb,
                        vendor_id: s.vid,
                        product_id: s.pid,
                        serial: s.serial.clone(),
                        description: s.name,
                        source_line: s.header_line,
                        stable_key: keys.key(BusKind::Usb, s.vid, s.pid, s.serial.as_deref()),
                        gpio_lines: None,
                    });
                }
            }
        };

    for line in text.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(name) = trimmed.strip_suffix(':') {
            if !name.is_empty() && !trimmed.contains(": ") {
                flush(current.take(), &mut records, &mut keys);
                current = Some(Section {
                    name: name.to_string(),
                    header_line: line.to_string(),
                    vid: None,
                    pid: None,
                    serial: None,
                });
                continue;
            }
        }
        let Some((key, value)) = trimmed.split_once(':') else {
            skipped += 1;
            continue;
        };
        let Some(section) = current.as_mut() else {
            skipped += 1;
            continue;
        };
        match key.trim() {
            "Product ID" => section.pid = parse_profiler_hex(value),
            "Vendor ID" => section.vid = parse_profiler_hex(value),
            "Serial Number" => {
                let s = value.trim();
                if !s.is_empty() {
                    section.serial = Some(s.to_string());
                }
            }
            _ => {}
        }
    }
    flush(current.take(), &mut records, &mut keys);
    (records, skipped)
}

fn gpio_line_re() -> &'static regex::Regex {
    use std::sync::OnceLock;
    static RE: OnceLock<regex::Regex> = OnceLock::new();
    RE.get_or_init(|| {
        regex::Regex::new(r"^(gpiochip\d+)\s+\[([^\]]*)\]\s+\((\d+)\s+lines?\)$").unwrap()
    })
}

/// Parse `gpiochipN [label] (M lines)` output, one record per chip.
pub fn parse_gpio_listing(text: &str) -> (Vec<DeviceRecord>, usize) {
    let re = gpio_line_re();
    let mut records = Vec::new();
    let mut skipped = 0;
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let Some(caps) = re.captures(line.trim_end()) else {
            skipped += 1;
            continue;
        };
        let chip = caps[1].to_string();
        let label = caps[2].to_string();
        let lines: u32 = caps[3].parse().unwrap_or(0);
        records.push(DeviceRecord {
            bus: BusKind::Gpio,
            vendor_id: None,
            product_id: None,
            serial: None,
            description: label,
            source_line: line.to_string(),
            stable_key: stable_key(BusKind::Gpio, None, None, &chip),
            gpio_lines: Some(lines),
        });
    }
    (records, skipped)
}

// ---------------------------------------------------------------------------
// Merge

/// Merge parser outputs into one inventory.
///
/// Records are deduplicated first-occurrence-wins in enumerator priority
/// order (usb listing, then profiler, then gpio). Identity for the dedup is
/// (bus, vendor, product, per-listing occurrence ordinal) so a serial-less
/// usb listing and a serial-bearing profiler listing still merge; records
/// without vendor/product ids are identified by their stable key.
pub fn merge_inventory(
    platform: &PlatformDescriptor,
    parsed: Vec<(Enumerator, Vec<DeviceRecord>)>,
) -> HardwareInventory {
    let mut groups = parsed;
    groups.sort_by_key(|(e, _)| e.priority());

    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut devices: Vec<DeviceRecord> = Vec::new();
    for (_, records) in groups {
        let mut ordinals: BTreeMap<(BusKind, u16, u16), u32> = BTreeMap::new();
        for record in records {
            let identity = match (record.vendor_id, record.product_id) {
                (Some(v), Some(p)) => {
                    let n = ordinals.entry((record.bus, v, p)).or_insert(0);
                    let id = format!("{}:{v:04x}:{p:04x}#{n}", record.bus.name());
                    *n += 1;
                    id
                }
                _ => record.stable_key.clone(),
            };
            if seen.insert(identity) {
                devices.push(record);
            }
        }
    }
    devices.sort_by(|a, b| a.stable_key.cmp(&b.stable_key));
    let inventory_hash = HardwareInventory::compute_hash(&devices);
    HardwareInventory {
        taken_at: now_rfc3339(),
        platform: platform.clone(),
        devices,
        inventory_hash,
    }
}

/// Set difference of two inventories by stable key: (added, removed).
pub fn diff_inventories(
    before: &HardwareInventory,
    after: &HardwareInventory,
) -> (Vec<String>, Vec<String>) {
    let old: BTreeSet<&str> = before
        .devices
        .iter()
        .map(|d| d.stable_key.as_str())
        .collect();
    let new: BTreeSet<&str> = after
        .devices
        .iter()
        .map(|d| d.stable_key.as_str())
        .collect();
    let added = new.difference(&old).map(|s| s.to_string()).collect();
    let removed = old.difference(&new).map(|s| s.to_string()).collect();
    (added, removed)
}

/// Fixture corpus layout: `fixtures/enumerators/<platform>/<tool>.txt`.
pub fn fixture_path(root: &Path, platform: &str, tool: &str) -> PathBuf {
    root.join("enumerators")
        .join(platform)
        .join(format!("{tool}.txt"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simulated_platform() -> PlatformDescriptor {
        PlatformDescriptor {
            os_family: OsFamily::Simulated,
            arch: Arch::X86_64,
            available_enumerators: BTreeSet::from([Enumerator::SimulatedBus]),
        }
    }

    #[test]
    fn usb_line_parses_ids_and_description() {
        let (records, skipped) = parse_usb_listing("Bus 001 Device 004: ID 2341:0043 Arduino Uno");
        assert_eq!(skipped, 0);
        assert_eq!(records.len(), 1);
        let r = &records[0];
        assert_eq!(r.bus, BusKind::Usb);
        assert_eq!(r.vendor_id, Some(0x2341));
        assert_eq!(r.product_id, Some(0x0043));
        assert_eq!(r.description, "Arduino Uno");
        assert_eq!(r.stable_key, "usb:2341:0043:0");
    }

    #[test]
    fn usb_empty_input_yields_nothing() {
        let (records, skipped) = parse_usb_listing("");
        assert!(records.is_empty());
        assert_eq!(skipped, 0);
    }

    #[test]
    fn usb_garbage_lines_are_counted() {
        let (records, skipped) =
            parse_usb_listing("garbage\nBus 001 Device 002: ID 0403:6001 FTDI");
        assert_eq!(records.len(), 1);
        assert_eq!(skipped, 1);
    }

    #[test]
    fn usb_malformed_hex_is_skipped() {
        let (records, skipped) = parse_usb_listing("Bus 001 Device 002: ID zzzz:6001 Broken");
        assert!(records.is_empty());
        assert_eq!(skipped, 1);
    }

    #[test]
    fn usb_duplicate_ids_get_distinct_keys() {
        let text = "Bus 001 Device 002: ID 2f24:a101 Servo A\n\
                    Bus 001 Device 003: ID 2f24:a101 Servo B";
        let (records, _) = parse_usb_listing(text);
        assert_eq!(records[0].stable_key, "usb:2f24:a101:0");
        assert_eq!(records[1].stable_key, "usb:2f24:a101:1");
    }

    #[test]
    fn usb_source_lines_roundtrip_matched_subset() {
        let text = "noise\nBus 001 Device 004: ID 2341:0043 Arduino Uno\nmore noise\n\
                    Bus 001 Device 003: ID 0403:6001 FTDI";
        let (records, _) = parse_usb_listing(text);
        let matched: Vec<&str> = text.lines().filter(|l| usb_line_re().is_match(l)).collect();
        let sources: Vec<&str> = records.iter().map(|r| r.source_line.as_str()).collect();
        assert_eq!(sources, matched);
    }

    #[test]
    fn profiler_block_parses_ids() {
        let (records, _) = parse_profiler_listing(crate::fixtures::PROFILER_MACOS);
        assert_eq!(records.len(), 2);
        let arduino = &records[0];
        assert_eq!(arduino.vendor_id, Some(0x2341));
        assert_eq!(arduino.product_id, Some(0x0043));
        assert_eq!(arduino.description, "Arduino Uno");
        assert_eq!(arduino.serial.as_deref(), Some("95530343834351A0E1D1"));
        assert_eq!(records[1].vendor_id, Some(0x2109));
    }

    #[test]
    fn profiler_empty_yields_nothing() {
        let (records, _) = parse_profiler_listing("");
        assert!(records.is_empty());
    }

    #[test]
    fn gpio_line_parses_label_and_lines() {
        let (records, skipped) = parse_gpio_listing("gpiochip0 [pinctrl-bcm2711] (58 lines)");
        assert_eq!(skipped, 0);
        assert_eq!(records.len(), 1);
        let r = &records[0];
        assert_eq!(r.bus, BusKind::Gpio);
        assert_eq!(r.description, "pinctrl-bcm2711");
        assert_eq!(r.gpio_lines, Some(58));
        assert_eq!(r.stable_key, "gpio:----:----:gpiochip0");
    }

    #[test]
    fn gpio_empty_yields_nothing() {
        let (records, skipped) = parse_gpio_listing("");
        assert!(records.is_empty());
        assert_eq!(skipped, 0);
    }

    #[test]
    fn merge_dedups_same_device_from_two_parsers() {
        let (usb, _) = parse_usb_listing("Bus 001 Device 004: ID 2341:0043 Arduino Uno");
        let (profiler, _) = parse_profiler_listing(crate::fixtures::PROFILER_MACOS);
        let inv = merge_inventory(
            &simulated_platform(),
            vec![
                (Enumerator::SystemProfile, profiler),
                (Enumerator::UsbList, usb),
            ],
        );
        let arduinos: Vec<_> = inv
            .devices
            .iter()
            .filter(|d| d.vendor_id == Some(0x2341))
            .collect();
        assert_eq!(arduinos.len(), 1);
        // usb listing has higher priority, so its record (index-keyed) wins
        assert_eq!(arduinos[0].stable_key, "usb:2341:0043:0");
    }

    #[test]
    fn merge_of_nothing_is_a_valid_empty_inventory() {
        let inv = merge_inventory(&simulated_platform(), vec![]);
        assert!(inv.devices.is_empty());
        assert!(inv.verify_hash());
        let again = merge_inventory(&simulated_platform(), vec![]);
        assert_eq!(inv.inventory_hash, again.inventory_hash);
    }

    #[test]
    fn merge_hash_is_permutation_invariant() {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let text = "Bus 001 Device 002: ID 2f24:a101 Servo\n\
                    Bus 001 Device 003: ID 2f24:c401 Camera\n\
                    Bus 001 Device 004: ID 2f24:b10a Gpio";
        let (base, _) = parse_usb_listing(text);
        let reference = merge_inventory(
            &simulated_platform(),
            vec![(Enumerator::UsbList, base.clone())],
        );
        for _ in 0..50 {
            let mut shuffled = base.clone();
            shuffled.shuffle(&mut rng);
            let inv = merge_inventory(&simulated_platform(), vec![(Enumerator::UsbList, shuffled)]);
            assert_eq!(inv.inventory_hash, reference.inventory_hash);
        }
    }

    #[test]
    fn detect_platform_simulated_has_only_virtual_bus() {
        let p = detect_platform(true);
        assert_eq!(p.os_family, OsFamily::Simulated);
        assert_eq!(
            p.available_enumerators,
            BTreeSet::from([Enumerator::SimulatedBus])
        );
    }

    #[test]
    fn enumerator_probe_finds_tools_on_path() {
        use std::os::unix::fs::PermissionsExt;
        let tmp = tempfile::TempDir::new().unwrap();
        for tool in ["lsusb", "gpiodetect"] {
            let p = tmp.path().join(tool);
            std::fs::write(&p, "#!/bin/sh\nexit 0\n").unwrap();
            std::fs::set_permissions(&p, std::fs::Permissions::from_mode(0o755)).unwrap();
        }
        let found = available_enumerators_from_path(OsFamily::Linux, tmp.path().to_str().unwrap());
        assert_eq!(
            found,
            BTreeSet::from([Enumerator::UsbList, Enumerator::GpioDetect])
        );
        let none = available_enumerators_from_path(OsFamily::Linux, "/nonexistent-path-xyz");
        assert!(none.is_empty());
    }

    #[test]
    fn replay_returns_fixture_text_verbatim() {
        let mut platform = simulated_platform();
        platform.available_enumerators = BTreeSet::from([Enumerator::UsbList]);
        let fixtures = BTreeMap::from([(
            Enumerator::UsbList,
            crate::fixtures::LSUSB_LINUX.to_string(),
        )]);
        let (outputs, events) =
            run_enumerators(&platform, Some(&fixtures), &EnumeratorRunner::default());
        assert_eq!(outputs[&Enumerator::UsbList], crate::fixtures::LSUSB_LINUX);
        assert!(events.is_empty());
    }

    #[test]
    fn failing_enumerator_degrades_to_empty_output() {
        let mut platform = simulated_platform();
        platform.available_enumerators = BTreeSet::from([Enumerator::UsbList]);
        let runner = EnumeratorRunner {
            commands: BTreeMap::from([(
                Enumerator::UsbList,
                vec!["sh".to_string(), "-c".to_string(), "exit 3".to_string()],
            )]),
        };
        let (outputs, events) = run_enumerators(&platform, None, &runner);
        assert_eq!(outputs[&Enumerator::UsbList], "");
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].severity, Severity::Warn);
    }

    #[test]
    fn inventory_saves_and_reloads() {
        let tmp = tempfile::TempDir::new().unwrap();
        let (records, _) = parse_usb_listing("Bus 001 Device 004: ID 2341:0043 Arduino Uno");
        let inv = merge_inventory(&simulated_platform(), vec![(Enumerator::UsbList, records)]);
        let path = tmp.path().join("state/inventory.json");
        inv.save(&path).unwrap();
        let loaded = HardwareInventory::load(&path).unwrap();
        assert_eq!(loaded, inv);
        assert!(loaded.verify_hash());
        // canonical form ends with a newline
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.last(), Some(&b'\n'));
    }
}
