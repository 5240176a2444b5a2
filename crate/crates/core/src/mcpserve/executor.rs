//! Plan execution: bind call arguments into a handler plan and drive it
//! against the bus, step by step. The executor holds the device lease for
//! the whole call, so concurrent calls to the same device serialize.

use serde_json::Value;
use thiserror::Error;

use crate::identify::{ParamSpec, ParamType};
use crate::simbus::{
    checksum, offset_decode_trailing, offset_encode, BusError, BusLease, DeviceBus,
};
use crate::toolgen::{PlanStep, Postcondition, ToolEntry};

#[derive(Debug, Error)]
pub enum ExecError {
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error("invalid arguments: {}", .0.join("; "))]
    Args(Vec<String>),
    #[error("plan error: {0}")]
    Plan(String),
    #[error("expect mismatch at step {step}: wanted {wanted}, got {got}")]
    ExpectMismatch {
        step: usize,
        wanted: String,
        got: String,
    },
    #[error(
        "postcondition failed: {param} commanded {commanded} read back {observed} (tolerance {tolerance})"
    )]
    Postcondition {
        param: String,
        commanded: f64,
        observed: f64,
        tolerance: f64,
    },
}

/// What a finished plan produced. Frames win over text when both exist.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionOutcome {
    pub text: Option<String>,
    pub frames: Vec<Vec<u8>>,
    pub last_value: Option<i32>,
}

// ---------------------------------------------------------------------------
// Argument binding

/// Validate call arguments against the declared parameters: all present,
/// nothing extra, right types, inside bounds.
pub fn validate_args(
    params: &[ParamSpec],
    args: &serde_json::Map<String, Value>,
) -> Result<(), Vec<String>> {
    let mut errors = Vec::new();
    for key in args.keys() {
        if !params.iter().any(|p| p.name == *key) {
            errors.push(format!("unexpected argument: {key}"));
        }
    }
    for p in params {
        let Some(value) = args.get(&p.name) else {
            errors.push(format!("missing argument: {}", p.name));
            continue;
        };
        let type_ok = match p.param_type {
            ParamType::Integer => {
                value.is_i64() || value.is_u64() || value.as_f64().is_some_and(|f| f.fract() == 0.0)
            }
            ParamType::Number => value.is_number(),
            ParamType::String => value.is_string(),
            ParamType::Boolean => value.is_boolean(),
        };
        if !type_ok {
            errors.push(format!(
                "{}: expected {}",
                p.name,
                match p.param_type {
                    ParamType::Integer => "integer",
                    ParamType::Number => "number",
                    ParamType::String => "string",
                    ParamType::Boolean => "boolean",
                }
            ));
            continue;
        }
        if let Some(n) = value.as_f64() {
            if let Some(min) = p.min {
                if n < min {
                    errors.push(format!("{}: {n} below minimum {min}", p.name));
                }
            }
            if let Some(max) = p.max {
                if n > max {
                    errors.push(format!("{}: {n} above maximum {max}", p.name));
                }
            }
        }
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(errors)
    }
}

fn numeric_arg(args: &serde_json::Map<String, Value>, name: &str) -> Result<f64, ExecError> {
    args.get(name)
        .and_then(Value::as_f64)
        .ok_or_else(|| ExecError::Plan(format!("slot {{{name}}} has no numeric argument")))
}

/// Render one template token to its byte, or `None` for the `CK` directive.
fn token_byte(token: &str, args: &serde_json::Map<String, Value>) -> Result<Option<u8>, ExecError> {
    if token == "CK" {
        return Ok(None);
    }
    if let Some(slot) = token.strip_prefix('{').and_then(|t| t.strip_suffix('}')) {
        if let Some(base) = slot.strip_suffix("_lo") {
            return Ok(Some(offset_encode(numeric_arg(args, base)?).0));
        }
        if let Some(base) = slot.strip_suffix("_hi") {
            return Ok(Some(offset_encode(numeric_arg(args, base)?).1));
        }
        let v = numeric_arg(args, slot)?;
        if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
            return Err(ExecError::Plan(format!(
                "slot {{{slot}}} value {v} does not fit a single byte"
            )));
        }
        return Ok(Some(v as u8));
    }
    u8::from_str_radix(token, 16)
        .map(Some)
        .map_err(|_| ExecError::Plan(format!("bad template token: {token}")))
}

/// Expand a write template into frame bytes. `CK` must be the final token
/// and covers everything before it.
pub fn render_template(
    template: &str,
    args: &serde_json::Map<String, Value>,
) -> Result<Vec<u8>, ExecError> {
    let tokens: Vec<&str> = template.split_whitespace().collect();
    let mut bytes = Vec::with_capacity(tokens.len());
    for (i, token) in tokens.iter().enumerate() {
        match token_byte(token, args)? {
            Some(b) => bytes.push(b),
            None => {
                if i != tokens.len() - 1 {
                    return Err(ExecError::Plan(
                        "CK must be the final template token".to_string(),
                    ));
                }
                bytes.push(checksum(&bytes));
            }
        }
    }
    Ok(bytes)
}

/// Prefix-match a reply against an expect pattern. `??` matches any byte;
/// slots match the byte their argument renders to.
pub fn match_expect(
    pattern: &str,
    reply: &[u8],
    args: &serde_json::Map<String, Value>,
) -> Result<Result<(), (String, String)>, ExecError> {
    let tokens: Vec<&str> = pattern.split_whitespace().collect();
    let mut wanted = Vec::with_capacity(tokens.len());
    for token in &tokens {
        if *token == "??" {
            wanted.push(None);
        } else {
            match token_byte(token, args)? {
                Some(b) => wanted.push(Some(b)),
                None => return Err(ExecError::Plan("CK is not valid in expect".to_string())),
            }
        }
    }
    let wanted_text = wanted
        .iter()
        .map(|b| b.map_or("??".to_string(), |b| format!("{b:02x}")))
        .collect::<Vec<_>>()
        .join(" ");
    let got_text = hex::encode(reply);
    if reply.len() < wanted.len() {
        return Ok(Err((wanted_text, format!("{got_text} (too short)"))));
    }
    for (want, got) in wanted.iter().zip(reply) {
        if let Some(b) = want {
            if b != got {
                return Ok(Err((wanted_text, got_text)));
            }
        }
    }
    Ok(Ok(()))
}

/// Fill slots in a string-valued field (gpio line/value) from arguments.
fn resolve_string(text: &str, args: &serde_json::Map<String, Value>) -> Result<String, ExecError> {
    let mut out = String::new();
    let mut last = 0;
    for caps in crate::toolgen::slot_re().captures_iter(text) {
        let m = caps.get(0).unwrap();
        out.push_str(&text[last..m.start()]);
        let name = &caps[1];
        let rendered = match args.get(name) {
            Some(Value::Bool(b)) => if *b { "1" } else { "0" }.to_string(),
            Some(Value::String(s)) => s.clone(),
            Some(v) => match v.as_f64() {
                Some(f) if f.fract() == 0.0 => format!("{}", f as i64),
                Some(f) => f.to_string(),
                None => {
                    return Err(ExecError::Plan(format!(
                        "slot {{{name}}} is not renderable"
                    )))
                }
            },
            None => return Err(ExecError::Plan(format!("slot {{{name}}} has no argument"))),
        };
        out.push_str(&rendered);
        last = m.end();
    }
    out.push_str(&text[last..]);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Execution

/// Run one tool call end to end: validate arguments, walk the plan, check
/// the postcondition, and shape the outcome.
pub async fn execute_plan(
    bus: &dyn DeviceBus,
    entry: &ToolEntry,
    arguments: &serde_json::Map<String, Value>,
    call_id: &str,
) -> Result<ExecutionOutcome, ExecError> {
    validate_args(&entry.tool.params, arguments).map_err(ExecError::Args)?;

    let mut lease: Option<BusLease> = None;
    let mut last_read: Option<Vec<u8>> = None;
    let mut did_read = false;
    let mut frames: Vec<Vec<u8>> = Vec::new();

    for (i, step) in entry.plan.steps.iter().enumerate() {
        match step {
            PlanStep::Open { address, .. } => match &lease {
                None => lease = Some(bus.acquire(address, call_id).await?),
                Some(held) if held.device_key == *address => {}
                Some(held) => {
                    return Err(ExecError::Plan(format!(
                        "steps[{i}]: plan opens {address} while holding {}",
                        held.device_key
                    )));
                }
            },
            PlanStep::Delay { ms } => {
                tokio::time::sleep(std::time::Duration::from_millis(*ms)).await;
            }
            _ => {
                let held = lease
                    .as_ref()
                    .ok_or_else(|| ExecError::Plan(format!("steps[{i}]: I/O before open")))?;
                match step {
                    PlanStep::Write { template } => {
                        let bytes = render_template(template, arguments)?;
                        bus.write(held, &bytes).await?;
                    }
                    PlanStep::Read { length, timeout_ms } => {
                        let bytes = bus.read(held, *length, *timeout_ms).await?;
                        last_read = Some(bytes);
                        did_read = true;
                    }
                    PlanStep::Expect { pattern } => {
                        let reply = last_read.as_deref().ok_or_else(|| {
                            ExecError::Plan(format!("steps[{i}]: expect before any read"))
                        })?;
                        if let Err((wanted, got)) = match_expect(pattern, reply, arguments)? {
                            return Err(ExecError::ExpectMismatch {
                                step: i,
                                wanted,
                                got,
                            });
                        }
                    }
                    PlanStep::CaptureFrame { camera_key } => {
                        if held.device_key != *camera_key {
                            return Err(ExecError::Plan(format!(
                                "steps[{i}]: capture on {camera_key} while holding {}",
                                held.device_key
                            )));
                        }
                        frames.push(bus.capture_frame(held).await?);
                    }
                    PlanStep::GpioSet { line, value } => {
                        let line_text = resolve_string(line, arguments)?;
                        let line_no: u32 = line_text.parse().map_err(|_| {
                            ExecError::Plan(format!("steps[{i}]: bad gpio line {line_text}"))
                        })?;
                        let value_text = resolve_string(value, arguments)?;
                        let state = match value_text.as_str() {
                            "0" | "false" => false,
                            "1" | "true" => true,
                            other => {
                                return Err(ExecError::Plan(format!(
                                    "steps[{i}]: bad gpio value {other}"
                                )));
                            }
                        };
                        bus.gpio_set(held, line_no, state).await?;
                    }
                    PlanStep::Open { .. } | PlanStep::Delay { .. } => unreachable!(),
                }
            }
        }
    }

    let last_value = last_read.as_deref().and_then(offset_decode_trailing);
    if let Some(Postcondition::ReadbackWithin { param, tolerance }) = &entry.plan.postcondition {
        let commanded = numeric_arg(arguments, param)?;
        let observed = f64::from(last_value.ok_or_else(|| {
            ExecError::Plan("postcondition needs a decodable trailing read".to_string())
        })?);
        if (commanded - observed).abs() > *tolerance {
            return Err(ExecError::Postcondition {
                param: param.clone(),
                commanded,
                observed,
                tolerance: *tolerance,
            });
        }
    }

    let text = if frames.is_empty() {
        Some(match (did_read, last_value) {
            (true, Some(v)) => v.to_string(),
            _ => "ok".to_string(),
        })
    } else {
        None
    };
    Ok(ExecutionOutcome {
        text,
        frames,
        last_value,
    })
}
