//! Simulated device bus: a register-level protocol over virtual devices
//! loaded from a rig description, plus the `DeviceBus` trait the executor
//! drives so real transports can slot in later.
//!
//! Frame format (commands): `FA AF <unit> <op> [data...] <ck>` where `ck` is
//! the byte sum of everything before it, masked to 8 bits. Replies are not
//! checksummed. Values travel offset-binary: `raw = value + 32768`, little
//! endian, so negative angles need no sign handling in templates.
//!
//! | op   | meaning            | reply                       |
//! |------|--------------------|-----------------------------|
//! | 0x01 | write position     | `FA AF J 00 LO HI` (echo)   |
//! | 0x02 | read position      | `LO HI`                     |
//! | 0x03 | disable torque     | `FA AF J 00 LO HI` (state)  |
//! | 0x04 | enable torque      | `FA AF J 00 LO HI` (state)  |
//! | 0x05 | read status        | `FA AF J 00 LO HI` (torque) |
//! | 0x06 | firmware version   | value 3                     |
//! | 0x07 | ping               | value 1                     |
//! | 0x10 | camera info        | value 64 (frame edge px)    |
//! | 0x20 | gpio line count    | value N                     |
//!
//! Anything malformed or unsupported gets a NAK: `FA AF <unit> FF`. Each
//! command replaces the device's pending reply buffer; a read with nothing
//! pending times out.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use serde::Deserialize;
use thiserror::Error;

use crate::platform::{stable_key, BusKind};

pub const OFFSET_BIAS: i32 = 32768;
pub const FRAME_EDGE: u32 = 64;
pub const SERVO_JOINTS: u8 = 6;

pub const DEP_CAMERA: &str = "cam_backend";
pub const DEP_GPIO: &str = "gpio_access";

#[derive(Debug, Error)]
pub enum BusError {
    #[error("device not found: {0}")]
    DeviceNotFound(String),
    #[error("timeout after {timeout_ms} ms on {device_key}")]
    Timeout { device_key: String, timeout_ms: u64 },
    #[error("missing dependency: {0}")]
    MissingDependency(String),
    #[error("gpio line {line} out of range (device has {lines} lines)")]
    LineOutOfRange { line: u32, lines: u32 },
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("rig: {0}")]
    Rig(String),
}

/// Byte sum of `bytes`, masked to 8 bits — the trailing `CK` of every
/// command frame.
pub fn checksum(bytes: &[u8]) -> u8 {
    bytes.iter().fold(0u32, |acc, b| acc + u32::from(*b)) as u8
}

/// Offset-binary encode: round, bias by 32768, clamp into u16, split LE.
pub fn offset_encode(value: f64) -> (u8, u8) {
    let raw = (value.round() as i64 + i64::from(OFFSET_BIAS)).clamp(0, 65535) as u16;
    (raw as u8, (raw >> 8) as u8)
}

/// Decode the trailing two bytes of a reply as an offset-binary value.
pub fn offset_decode_trailing(bytes: &[u8]) -> Option<i32> {
    if bytes.len() < 2 {
        return None;
    }
    let lo = bytes[bytes.len() - 2];
    let hi = bytes[bytes.len() - 1];
    Some(i32::from(u16::from_le_bytes([lo, hi])) - OFFSET_BIAS)
}

// ---------------------------------------------------------------------------
// Virtual camera

/// Row of the marker for the zero-based joint index.
pub fn marker_row(joint_index: usize) -> u32 {
    5 + 9 * joint_index as u32
}

/// Column of the marker for a joint angle: -90° maps to the left edge, +90°
/// to the right, clamped so the 3x3 marker stays inside the frame.
pub fn marker_column(angle_deg: f64) -> u32 {
    let t = (angle_deg + 90.0) / 180.0;
    (t * 63.0).round().clamp(1.0, 62.0) as u32
}

/// Render the rig scene as a 64x64 grayscale PNG: dim border, one white 3x3
/// marker per joint. Same angles always produce the same bytes.
pub fn render_frame(angles_deg: &[f64]) -> Vec<u8> {
    let mut img = image::GrayImage::new(FRAME_EDGE, FRAME_EDGE);
    for x in 0..FRAME_EDGE {
        for y in [0, FRAME_EDGE - 1] {
            img.put_pixel(x, y, image::Luma([16]));
            img.put_pixel(y, x, image::Luma([16]));
        }
    }
    for (j, angle) in angles_deg.iter().enumerate() {
        let row = marker_row(j);
        let col = marker_column(*angle);
        if row + 1 >= FRAME_EDGE {
            continue;
        }
        for dy in -1i32..=1 {
            for dx in -1i32..=1 {
                let y = (row as i32 + dy) as u32;
                let x = (col as i32 + dx) as u32;
                img.put_pixel(x, y, image::Luma([255]));
            }
        }
    }
    let mut png = Vec::new();
    img.write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png)
        .expect("png encoding of an in-memory frame cannot fail");
    png
}

/// Check that a bus trace never interleaves two calls on one device: every
/// entry between an `acquire` and its `release` must belong to the same
/// call. Returns the first violation found.
pub fn verify_serialized_trace(trace: &[String]) -> Result<(), String> {
    // entry shape: "call=<id> <op> <device_key> ..."
    let mut active: BTreeMap<String, String> = BTreeMap::new();
    for entry in trace {
        let mut parts = entry.split_whitespace();
        let call = match parts.next().and_then(|t| t.strip_prefix("call=")) {
            Some(c) => c.to_string(),
            None => return Err(format!("malformed trace entry: {entry}")),
        };
        let op = parts.next().unwrap_or_default();
        let device = match parts.next() {
            Some(d) => d.to_string(),
            None => return Err(format!("malformed trace entry: {entry}")),
        };
        match (op, active.get(&device)) {
            ("acquire", None) => {
                active.insert(device, call);
            }
            ("acquire", Some(holder)) => {
                return Err(format!(
                    "call {call} acquired {device} while call {holder} held it"
                ));
            }
            ("release", Some(holder)) if *holder == call => {
                active.remove(&device);
            }
            (_, Some(holder)) if *holder == call => {}
            (op, holder) => {
                return Err(format!(
                    "interleaved trace: call {call} did {op} on {device} held by {holder:?}"
                ));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Bus trait

/// Exclusive access to one device for the duration of a tool call. Ops take
/// the lease, so two calls can never interleave on the same device.
pub struct BusLease {
    pub device_key: String,
    call: String,
    trace: Arc<Mutex<Vec<String>>>,
    _guard: tokio::sync::OwnedMutexGuard<()>,
}

impl Drop for BusLease {
    fn drop(&mut self) {
        if let Ok(mut t) = self.trace.lock() {
            t.push(format!("call={} release {}", self.call, self.device_key));
        }
    }
}

#[async_trait]
pub trait DeviceBus: Send + Sync {
    /// Lock `device_key` for one tool call. Blocks while another call holds
    /// the device.
    async fn acquire(&self, device_key: &str, call: &str) -> Result<BusLease, BusError>;
    async fn write(&self, lease: &BusLease, bytes: &[u8]) -> Result<(), BusError>;
    async fn read(
        &self,
        lease: &BusLease,
        length: usize,
        timeout_ms: u64,
    ) -> Result<Vec<u8>, BusError>;
    async fn gpio_set(&self, lease: &BusLease, line: u32, value: bool) -> Result<(), BusError>;
    /// Capture one camera frame as PNG bytes.
    async fn capture_frame(&self, lease: &BusLease) -> Result<Vec<u8>, BusError>;
    /// Whether a host-side dependency (camera backend, gpio access, ...) is
    /// currently present.
    fn has_dependency(&self, name: &str) -> bool;
    fn set_dependency(&self, name: &str, present: bool);
    /// Enumerator-style listing of currently attached devices.
    fn snapshot_listing(&self) -> String;
    /// Ordered op log; entries carry `call=<id>` for serialization checks.
    fn trace(&self) -> Vec<String>;
}

// ---------------------------------------------------------------------------
// Simulated implementation

#[derive(Debug, Deserialize)]
struct RigSpec {
    name: String,
    devices: Vec<RigDevice>,
}

#[derive(Debug, Deserialize)]
struct RigDevice {
    kind: String,
    vendor_id: String,
    product_id: String,
    description: String,
    #[serde(default)]
    lines: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimKind {
    Servo,
    Camera,
    Gpio,
}

struct SimState {
    /// Joint positions in degrees, index 0 = joint 1.
    positions: [i32; SERVO_JOINTS as usize],
    torque: [bool; SERVO_JOINTS as usize],
    gpio: Vec<bool>,
    pending_reply: Vec<u8>,
}

struct SimDevice {
    key: String,
    kind: SimKind,
    vendor_id: u16,
    product_id: u16,
    description: String,
    gpio_lines: u32,
    lock: Arc<tokio::sync::Mutex<()>>,
    state: Mutex<SimState>,
    dropped: AtomicBool,
}

impl SimDevice {
    /// Handle one command frame, producing the reply that replaces the
    /// pending buffer. Malformed input answers NAK rather than erroring.
    fn handle_frame(&self, frame: &[u8]) -> Vec<u8> {
        let nak = |unit: u8| vec![0xFA, 0xAF, unit, 0xFF];
        if frame.len() < 5 || frame[0] != 0xFA || frame[1] != 0xAF {
            return nak(*frame.get(2).unwrap_or(&0));
        }
        let unit = frame[2];
        let op = frame[3];
        if checksum(&frame[..frame.len() - 1]) != frame[frame.len() - 1] {
            return nak(unit);
        }
        let value_reply = |unit: u8, value: i32| {
            let (lo, hi) = offset_encode(f64::from(value));
            vec![0xFA, 0xAF, unit, 0x00, lo, hi]
        };
        let joint_index = |unit: u8| -> Option<usize> {
            (1..=SERVO_JOINTS)
                .contains(&unit)
                .then(|| usize::from(unit) - 1)
        };
        let mut state = self.state.lock().expect("sim state lock");
        match (self.kind, op, frame.len()) {
            (SimKind::Servo, 0x01, 7) => match joint_index(unit) {
                Some(j) => {
                    let raw = u16::from_le_bytes([frame[4], frame[5]]);
                    state.positions[j] = i32::from(raw) - OFFSET_BIAS;
                    vec![0xFA, 0xAF, unit, 0x00, frame[4], frame[5]]
                }
                None => nak(unit),
            },
            (SimKind::Servo, 0x02, 5) => match joint_index(unit) {
                Some(j) => {
                    let (lo, hi) = offset_encode(f64::from(state.positions[j]));
                    vec![lo, hi]
                }
                None => nak(unit),
            },
            (SimKind::Servo, 0x03, 5) | (SimKind::Servo, 0x04, 5) => match joint_index(unit) {
                Some(j) => {
                    state.torque[j] = op == 0x04;
                    value_reply(unit, i32::from(state.torque[j]))
                }
                None => nak(unit),
            },
            (SimKind::Servo, 0x05, 5) => match joint_index(unit) {
                Some(j) => value_reply(unit, i32::from(state.torque[j])),
                None => nak(unit),
            },
            (SimKind::Servo, 0x06, 5) if unit == 0 => value_reply(0, 3),
            (SimKind::Camera, 0x10, 5) if unit == 0 => value_reply(0, FRAME_EDGE as i32),
            (SimKind::Gpio, 0x20, 5) if unit == 0 => value_reply(0, self.gpio_lines as i32),
            (_, 0x07, 5) if unit == 0 => value_reply(0, 1),
            _ => nak(unit),
        }
    }
}

pub struct SimBus {
    rig_name: String,
    devices: Vec<Arc<SimDevice>>,
    by_key: BTreeMap<String, usize>,
    dependencies: Mutex<BTreeMap<String, bool>>,
    trace: Arc<Mutex<Vec<String>>>,
}

impl SimBus {
    pub fn from_json(text: &str) -> Result<Self, BusError> {
        let rig: RigSpec = serde_json::from_str(text).map_err(|e| BusError::Rig(e.to_string()))?;
        let mut devices = Vec::new();
        let mut by_key = BTreeMap::new();
        let mut ordinals: BTreeMap<(u16, u16), u32> = BTreeMap::new();
        for d in &rig.devices {
            let kind = match d.kind.as_str() {
                "servo" => SimKind::Servo,
                "camera" => SimKind::Camera,
                "gpio" => SimKind::Gpio,
                other => return Err(BusError::Rig(format!("unknown device kind: {other}"))),
            };
            let vid = u16::from_str_radix(&d.vendor_id, 16)
                .map_err(|_| BusError::Rig(format!("bad vendor id: {}", d.vendor_id)))?;
            let pid = u16::from_str_radix(&d.product_id, 16)
                .map_err(|_| BusError::Rig(format!("bad product id: {}", d.product_id)))?;
            let ordinal = ordinals.entry((vid, pid)).or_insert(0);
            let key = stable_key(BusKind::Usb, Some(vid), Some(pid), &ordinal.to_string());
            *ordinal += 1;
            let gpio_lines = d.lines.unwrap_or(8);
            by_key.insert(key.clone(), devices.len());
            devices.push(Arc::new(SimDevice {
                key,
                kind,
                vendor_id: vid,
                product_id: pid,
                description: d.description.clone(),
                gpio_lines,
                lock: Arc::new(tokio::sync::Mutex::new(())),
                state: Mutex::new(SimState {
                    positions: [0; SERVO_JOINTS as usize],
                    torque: [true; SERVO_JOINTS as usize],
                    gpio: vec![false; gpio_lines as usize],
                    pending_reply: Vec::new(),
                }),
                dropped: AtomicBool::new(false),
            }));
        }
        Ok(Self {
            rig_name: rig.name,
            devices,
            by_key,
            dependencies: Mutex::new(BTreeMap::from([
                (DEP_CAMERA.to_string(), true),
                (DEP_GPIO.to_string(), true),
            ])),
            trace: Arc::new(Mutex::new(Vec::new())),
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, BusError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BusError::Rig(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn rig_name(&self) -> &str {
        &self.rig_name
    }

    pub fn device_keys(&self) -> Vec<String> {
        self.devices.iter().map(|d| d.key.clone()).collect()
    }

    fn device(&self, key: &str) -> Result<&Arc<SimDevice>, BusError> {
        let device = self
            .by_key
            .get(key)
            .map(|&i| &self.devices[i])
            .ok_or_else(|| BusError::DeviceNotFound(key.to_string()))?;
        if device.dropped.load(Ordering::SeqCst) {
            return Err(BusError::DeviceNotFound(key.to_string()));
        }
        Ok(device)
    }

    fn log(&self, entry: String) {
        self.trace.lock().expect("trace lock").push(entry);
    }

    /// Fault injection: unplug a device. Ops fail with `DeviceNotFound` and
    /// the snapshot listing omits it until restored.
    pub fn drop_device(&self, key: &str) -> bool {
        match self.by_key.get(key) {
            Some(&i) => {
                self.devices[i].dropped.store(true, Ordering::SeqCst);
                true
            }
            None => false,
        }
    }

    /// Undo `drop_device`, as if the device were plugged back in.
    pub fn restore_device(&self, key: &str) -> bool {
        match self.by_key.get(key) {
            Some(&i) => {
                self.devices[i].dropped.store(false, Ordering::SeqCst);
                true
            }
            None => false,
        }
    }

    /// Current commanded position in degrees, for assertions.
    pub fn servo_position(&self, key: &str, joint: u8) -> Option<i32> {
        let device = self.by_key.get(key).map(|&i| &self.devices[i])?;
        if device.kind != SimKind::Servo || !(1..=SERVO_JOINTS).contains(&joint) {
            return None;
        }
        let state = device.state.lock().expect("sim state lock");
        Some(state.positions[usize::from(joint) - 1])
    }

    /// Current gpio line state, for assertions.
    pub fn gpio_state(&self, key: &str, line: u32) -> Option<bool> {
        let device = self.by_key.get(key).map(|&i| &self.devices[i])?;
        if device.kind != SimKind::Gpio {
            return None;
        }
        let state = device.state.lock().expect("sim state lock");
        state.gpio.get(line as usize).copied()
    }

    /// Angles of the first servo in rig order — what the virtual camera
    /// actually photographs. Exposed so tests can compare frames against
    /// ground truth.
    pub fn scene_angles(&self) -> Vec<f64> {
        self.devices
            .iter()
            .find(|d| d.kind == SimKind::Servo && !d.dropped.load(Ordering::SeqCst))
            .map(|d| {
                let state = d.state.lock().expect("sim state lock");
                state.positions.iter().map(|&p| f64::from(p)).collect()
            })
            .unwrap_or_default()
    }
}

#[async_trait]
impl DeviceBus for SimBus {
    async fn acquire(&self, device_key: &str, call: &str) -> Result<BusLease, BusError> {
        let lock = {
            let device = self.device(device_key)?;
            Arc::clone(&device.lock)
        };
        let guard = lock.lock_owned().await;
        // Re-check: the device may have been unplugged while we waited.
        self.device(device_key)?;
        self.log(format!("call={call} acquire {device_key}"));
        Ok(BusLease {
            device_key: device_key.to_string(),
            call: call.to_string(),
            trace: Arc::clone(&self.trace),
            _guard: guard,
        })
    }

    async fn write(&self, lease: &BusLease, bytes: &[u8]) -> Result<(), BusError> {
        let device = self.device(&lease.device_key)?;
        let reply = device.handle_frame(bytes);
        device.state.lock().expect("sim state lock").pending_reply = reply;
        self.log(format!(
            "call={} write {} {}",
            lease.call,
            lease.device_key,
            hex::encode(bytes)
        ));
        Ok(())
    }

    async fn read(
        &self,
        lease: &BusLease,
        length: usize,
        timeout_ms: u64,
    ) -> Result<Vec<u8>, BusError> {
        let pending = {
            let device = self.device(&lease.device_key)?;
            let mut state = device.state.lock().expect("sim state lock");
            if state.pending_reply.is_empty() {
                None
            } else {
                let n = length.min(state.pending_reply.len());
                Some(state.pending_reply.drain(..n).collect::<Vec<u8>>())
            }
        };
        match pending {
            Some(bytes) => {
                self.log(format!(
                    "call={} read {} {}B",
                    lease.call,
                    lease.device_key,
                    bytes.len()
                ));
                Ok(bytes)
            }
            None => {
                // Nothing arrived; model the serial timeout for real.
                tokio::time::sleep(std::time::Duration::from_millis(timeout_ms)).await;
                Err(BusError::Timeout {
                    device_key: lease.device_key.clone(),
                    timeout_ms,
                })
            }
        }
    }

    async fn gpio_set(&self, lease: &BusLease, line: u32, value: bool) -> Result<(), BusError> {
        if !self.has_dependency(DEP_GPIO) {
            return Err(BusError::MissingDependency(DEP_GPIO.to_string()));
        }
        let device = self.device(&lease.device_key)?;
        if device.kind != SimKind::Gpio {
            return Err(BusError::Protocol(format!(
                "gpio_set on non-gpio device {}",
                lease.device_key
            )));
        }
        if line >= device.gpio_lines {
            return Err(BusError::LineOutOfRange {
                line,
                lines: device.gpio_lines,
            });
        }
        device.state.lock().expect("sim state lock").gpio[line as usize] = value;
        self.log(format!(
            "call={} gpio {} line={} value={}",
            lease.call,
            lease.device_key,
            line,
            u8::from(value)
        ));
        Ok(())
    }

    async fn capture_frame(&self, lease: &BusLease) -> Result<Vec<u8>, BusError> {
        if !self.has_dependency(DEP_CAMERA) {
            return Err(BusError::MissingDependency(DEP_CAMERA.to_string()));
        }
        let device = self.device(&lease.device_key)?;
        if device.kind != SimKind::Camera {
            return Err(BusError::Protocol(format!(
                "capture_frame on non-camera device {}",
                lease.device_key
            )));
        }
        let png = render_frame(&self.scene_angles());
        self.log(format!(
            "call={} frame {} {}B",
            lease.call,
            lease.device_key,
            png.len()
        ));
        Ok(png)
    }

    fn has_dependency(&self, name: &str) -> bool {
        *self
            .dependencies
            .lock()
            .expect("dependency lock")
            .get(name)
            .unwrap_or(&false)
    }

    fn set_dependency(&self, name: &str, present: bool) {
        self.dependencies
            .lock()
            .expect("dependency lock")
            .insert(name.to_string(), present);
    }

    fn snapshot_listing(&self) -> String {
        let mut out = String::new();
        for (i, device) in self.devices.iter().enumerate() {
            if device.dropped.load(Ordering::SeqCst) {
                continue;
            }
            out.push_str(&format!(
                "Bus 001 Device {:03}: ID {:04x}:{:04x} {}\n",
                i + 2,
                device.vendor_id,
                device.product_id,
                device.description
            ));
        }
        out
    }

    fn trace(&self) -> Vec<String> {
        self.trace.lock().expect("trace lock").clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{RIG_CAP40, RIG_DEFAULT};

    fn bus() -> SimBus {
        SimBus::from_json(RIG_DEFAULT).unwrap()
    }

    fn servo_key() -> String {
        "usb:2f24:a101:0".to_string()
    }

    fn frame(unit: u8, op: u8, data: &[u8]) -> Vec<u8> {
        let mut f = vec![0xFA, 0xAF, unit, op];
        f.extend_from_slice(data);
        f.push(checksum(&f));
        f
    }

    #[test]
    fn checksum_is_byte_sum_mod_256() {
        assert_eq!(checksum(&[0xFA, 0xAF, 0x03, 0x01, 0x2D, 0x80]), 0x5A);
        assert_eq!(checksum(&[]), 0);
        assert_eq!(checksum(&[0xFF, 0x01]), 0);
    }

    #[test]
    fn offset_encoding_roundtrips() {
        use rand::Rng;
        use rand::SeedableRng;
        assert_eq!(offset_encode(0.0), (0x00, 0x80));
        assert_eq!(offset_encode(45.0), (0x2D, 0x80));
        assert_eq!(offset_encode(-30.0), (0xE2, 0x7F));
        assert_eq!(offset_encode(30.0), (0x1E, 0x80));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let v = rng.gen_range(-180..=180);
            let (lo, hi) = offset_encode(f64::from(v));
            assert_eq!(offset_decode_trailing(&[lo, hi]), Some(v));
        }
    }

    #[test]
    fn marker_geometry_matches_frozen_values() {
        assert_eq!(marker_row(0), 5);
        assert_eq!(marker_row(1), 14);
        assert_eq!(marker_row(5), 50);
        assert_eq!(marker_column(0.0), 32);
        assert_eq!(marker_column(45.0), 47);
        assert_eq!(marker_column(-45.0), 16);
        assert_eq!(marker_column(90.0), 62);
        assert_eq!(marker_column(-90.0), 1);
        assert_eq!(marker_column(500.0), 62);
    }

    #[test]
    fn rendered_frame_is_deterministic_with_markers_in_place() {
        let angles = vec![0.0, 45.0, -45.0, 0.0, 0.0, 0.0];
        let a = render_frame(&angles);
        let b = render_frame(&angles);
        assert_eq!(a, b);
        let img = image::load_from_memory(&a).unwrap().to_luma8();
        assert_eq!(img.dimensions(), (FRAME_EDGE, FRAME_EDGE));
        assert_eq!(img.get_pixel(marker_column(45.0), marker_row(1)).0[0], 255);
        assert_eq!(img.get_pixel(marker_column(-45.0), marker_row(2)).0[0], 255);
        // background away from markers and border stays dark
        assert_eq!(img.get_pixel(40, 60).0[0], 0);
    }

    #[tokio::test]
    async fn write_position_echoes_and_moves_the_joint() {
        let bus = bus();
        let lease = bus.acquire(&servo_key(), "t1").await.unwrap();
        let (lo, hi) = offset_encode(45.0);
        bus.write(&lease, &frame(3, 0x01, &[lo, hi])).await.unwrap();
        let reply = bus.read(&lease, 6, 50).await.unwrap();
        assert_eq!(reply, vec![0xFA, 0xAF, 0x03, 0x00, lo, hi]);
        assert_eq!(bus.servo_position(&servo_key(), 3), Some(45));
    }

    #[tokio::test]
    async fn read_position_returns_bare_offset_value() {
        let bus = bus();
        let lease = bus.acquire(&servo_key(), "t1").await.unwrap();
        let (lo, hi) = offset_encode(-30.0);
        bus.write(&lease, &frame(2, 0x01, &[lo, hi])).await.unwrap();
        bus.read(&lease, 6, 50).await.unwrap();
        bus.write(&lease, &frame(2, 0x02, &[])).await.unwrap();
        let reply = bus.read(&lease, 2, 50).await.unwrap();
        assert_eq!(offset_decode_trailing(&reply), Some(-30));
    }

    #[tokio::test]
    async fn meta_ops_report_frozen_values() {
        let bus = bus();
        let cases = [
            ("usb:2f24:a101:0", 0x06u8, 3i32),
            ("usb:2f24:a101:0", 0x07, 1),
            ("usb:2f24:c401:0", 0x10, 64),
            ("usb:2f24:c401:0", 0x07, 1),
            ("usb:2f24:b10a:0", 0x20, 8),
        ];
        for (key, op, expected) in cases {
            let lease = bus.acquire(key, "t1").await.unwrap();
            bus.write(&lease, &frame(0, op, &[])).await.unwrap();
            let reply = bus.read(&lease, 6, 50).await.unwrap();
            assert_eq!(&reply[..4], &[0xFA, 0xAF, 0x00, 0x00], "op {op:#x}");
            assert_eq!(offset_decode_trailing(&reply), Some(expected), "op {op:#x}");
        }
    }

    #[tokio::test]
    async fn torque_ops_ack_with_state_and_show_in_status() {
        let bus = bus();
        let lease = bus.acquire(&servo_key(), "t1").await.unwrap();
        bus.write(&lease, &frame(4, 0x03, &[])).await.unwrap();
        let ack = bus.read(&lease, 6, 50).await.unwrap();
        assert_eq!(&ack[..4], &[0xFA, 0xAF, 0x04, 0x00]);
        assert_eq!(offset_decode_trailing(&ack), Some(0));
        bus.write(&lease, &frame(4, 0x05, &[])).await.unwrap();
        let status = bus.read(&lease, 6, 50).await.unwrap();
        assert_eq!(offset_decode_trailing(&status), Some(0));
        bus.write(&lease, &frame(4, 0x04, &[])).await.unwrap();
        let ack = bus.read(&lease, 6, 50).await.unwrap();
        assert_eq!(offset_decode_trailing(&ack), Some(1));
        bus.write(&lease, &frame(4, 0x05, &[])).await.unwrap();
        let status = bus.read(&lease, 6, 50).await.unwrap();
        assert_eq!(offset_decode_trailing(&status), Some(1));
    }

    #[tokio::test]
    async fn bad_checksum_unknown_op_and_bad_joint_nak() {
        let bus = bus();
        let lease = bus.acquire(&servo_key(), "t1").await.unwrap();
        let mut corrupted = frame(1, 0x01, &[0x00, 0x80]);
        let last = corrupted.last_mut().unwrap();
        *last = last.wrapping_add(1);
        bus.write(&lease, &corrupted).await.unwrap();
        assert_eq!(
            bus.read(&lease, 6, 50).await.unwrap(),
            vec![0xFA, 0xAF, 0x01, 0xFF]
        );
        bus.write(&lease, &frame(1, 0x42, &[])).await.unwrap();
        assert_eq!(
            bus.read(&lease, 6, 50).await.unwrap(),
            vec![0xFA, 0xAF, 0x01, 0xFF]
        );
        bus.write(&lease, &frame(7, 0x01, &[0x00, 0x80]))
            .await
            .unwrap();
        assert_eq!(
            bus.read(&lease, 6, 50).await.unwrap(),
            vec![0xFA, 0xAF, 0x07, 0xFF]
        );
    }

    #[tokio::test]
    async fn second_write_replaces_pending_reply() {
        let bus = bus();
        let lease = bus.acquire(&servo_key(), "t1").await.unwrap();
        bus.write(&lease, &frame(0, 0x07, &[])).await.unwrap();
        bus.write(&lease, &frame(0, 0x06, &[])).await.unwrap();
        let reply = bus.read(&lease, 6, 50).await.unwrap();
        assert_eq!(offset_decode_trailing(&reply), Some(3));
    }

    #[tokio::test]
    async fn read_with_nothing_pending_times_out() {
        let bus = bus();
        let lease = bus.acquire(&servo_key(), "t1").await.unwrap();
        let err = bus.read(&lease, 6, 5).await.unwrap_err();
        assert_eq!(err.to_string(), "timeout after 5 ms on usb:2f24:a101:0");
    }

    #[tokio::test]
    async fn capture_requires_camera_backend() {
        let bus = bus();
        let lease = bus.acquire("usb:2f24:c401:0", "t1").await.unwrap();
        let png = bus.capture_frame(&lease).await.unwrap();
        assert!(png.starts_with(&[0x89, b'P', b'N', b'G']));
        bus.set_dependency(DEP_CAMERA, false);
        let err = bus.capture_frame(&lease).await.unwrap_err();
        assert_eq!(err.to_string(), "missing dependency: cam_backend");
        bus.set_dependency(DEP_CAMERA, true);
        assert!(bus.capture_frame(&lease).await.is_ok());
    }

    #[tokio::test]
    async fn capture_tracks_servo_motion() {
        let bus = bus();
        {
            let lease = bus.acquire(&servo_key(), "t1").await.unwrap();
            let (lo, hi) = offset_encode(60.0);
            bus.write(&lease, &frame(1, 0x01, &[lo, hi])).await.unwrap();
            bus.read(&lease, 6, 50).await.unwrap();
        }
        let lease = bus.acquire("usb:2f24:c401:0", "t2").await.unwrap();
        let png = bus.capture_frame(&lease).await.unwrap();
        let img = image::load_from_memory(&png).unwrap().to_luma8();
        assert_eq!(img.get_pixel(marker_column(60.0), marker_row(0)).0[0], 255);
    }

    #[tokio::test]
    async fn gpio_set_validates_kind_range_and_dependency() {
        let bus = bus();
        let gpio_key = "usb:2f24:b10a:0";
        let lease = bus.acquire(gpio_key, "t1").await.unwrap();
        bus.gpio_set(&lease, 5, true).await.unwrap();
        assert_eq!(bus.gpio_state(gpio_key, 5), Some(true));
        let err = bus.gpio_set(&lease, 8, true).await.unwrap_err();
        assert!(matches!(
            err,
            BusError::LineOutOfRange { line: 8, lines: 8 }
        ));
        bus.set_dependency(DEP_GPIO, false);
        let err = bus.gpio_set(&lease, 1, true).await.unwrap_err();
        assert_eq!(err.to_string(), "missing dependency: gpio_access");
        bus.set_dependency(DEP_GPIO, true);
        let servo_lease = bus.acquire(&servo_key(), "t2").await.unwrap();
        assert!(matches!(
            bus.gpio_set(&servo_lease, 0, true).await,
            Err(BusError::Protocol(_))
        ));
    }

    #[tokio::test]
    async fn dropped_device_vanishes_until_restored() {
        let bus = bus();
        assert!(bus.drop_device(&servo_key()));
        let Err(err) = bus.acquire(&servo_key(), "t1").await else {
            panic!("acquire on a dropped device must fail");
        };
        assert_eq!(err.to_string(), "device not found: usb:2f24:a101:0");
        assert!(!bus.snapshot_listing().contains("a101"));
        assert!(bus.restore_device(&servo_key()));
        assert!(bus.acquire(&servo_key(), "t1").await.is_ok());
        assert!(bus.snapshot_listing().contains("a101"));
    }

    #[test]
    fn snapshot_parses_back_to_the_same_keys() {
        let bus = bus();
        let (records, skipped) = crate::platform::parse_usb_listing(&bus.snapshot_listing());
        assert_eq!(skipped, 0);
        let parsed: Vec<String> = records.into_iter().map(|r| r.stable_key).collect();
        assert_eq!(parsed, bus.device_keys());
    }

    #[test]
    fn cap40_rig_enumerates_four_servos_with_ordinal_keys() {
        let bus = SimBus::from_json(RIG_CAP40).unwrap();
        assert_eq!(
            bus.device_keys(),
            vec![
                "usb:2f24:a101:0",
                "usb:2f24:a101:1",
                "usb:2f24:a101:2",
                "usb:2f24:a101:3"
            ]
        );
    }

    #[test]
    fn trace_verifier_flags_interleaving() {
        let clean = [
            "call=a acquire usb:x",
            "call=a write usb:x fa",
            "call=a release usb:x",
            "call=b acquire usb:x",
            "call=b release usb:x",
        ]
        .map(String::from);
        assert!(verify_serialized_trace(&clean).is_ok());
        let interleaved = [
            "call=a acquire usb:x",
            "call=b write usb:x fa",
            "call=a release usb:x",
        ]
        .map(String::from);
        assert!(verify_serialized_trace(&interleaved).is_err());
        let double_acquire = ["call=a acquire usb:x", "call=b acquire usb:x"].map(String::from);
        assert!(verify_serialized_trace(&double_acquire).is_err());
    }

    #[tokio::test]
    async fn trace_records_calls_in_order() {
        let bus = bus();
        {
            let lease = bus.acquire(&servo_key(), "c1").await.unwrap();
            bus.write(&lease, &frame(0, 0x07, &[])).await.unwrap();
            bus.read(&lease, 6, 50).await.unwrap();
        }
        let trace = bus.trace();
        assert_eq!(trace.len(), 4);
        assert!(trace[0].starts_with("call=c1 acquire"));
        assert!(trace[1].starts_with("call=c1 write"));
        assert!(trace[2].starts_with("call=c1 read"));
        assert!(trace[3].starts_with("call=c1 release"));
    }
}
