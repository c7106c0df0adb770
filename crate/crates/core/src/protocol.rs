//! Newline-delimited JSON wire format between nodes and the collector.
//!
//! Each message is one UTF-8 JSON object with a leading `"type"`
//! discriminator, fields in a fixed order, reals rendered with at most six
//! decimals, and a single trailing LF. A frame, LF included, never exceeds
//! [`MAX_FRAME_BYTES`]. The schema is closed: unknown fields are rejected,
//! and no field can carry binary or nested payloads.
//!
//! See `docs/protocol.md` for byte-level examples.

use std::collections::VecDeque;
use std::io::{self, Read};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::domain::{ModeId, ReconfigCommand, TelemetrySample};

/// Longest allowed frame, terminating LF included.
pub const MAX_FRAME_BYTES: usize = 1024;
pub const MAX_ID_CHARS: usize = 64;
pub const MAX_LABEL_CHARS: usize = 64;
pub const MAX_CLASS_LABELS: usize = 32;
pub const DEFAULT_PORT: u16 = 7171;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("unknown message type `{0}`")]
    UnknownType(String),
    #[error("`{msg_type}` message has unknown field `{field}`")]
    UnknownField { msg_type: String, field: String },
    #[error("`{msg_type}` message is missing field `{field}`")]
    MissingField { msg_type: String, field: String },
    #[error("field `{field}` out of range: {reason}")]
    OutOfRange { field: &'static str, reason: String },
    #[error("frame of {0} bytes exceeds the {MAX_FRAME_BYTES}-byte limit")]
    TooLong(usize),
    #[error("frame is not terminated by LF")]
    MissingNewline,
    #[error("stream ended inside a frame ({0} bytes buffered)")]
    Truncated(usize),
}

impl ProtocolError {
    /// Stable short name for diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            ProtocolError::Malformed(_) => "malformed",
            ProtocolError::UnknownType(_) => "unknown_type",
            ProtocolError::UnknownField { .. } => "unknown_field",
            ProtocolError::MissingField { .. } => "missing_field",
            ProtocolError::OutOfRange { .. } => "out_of_range",
            ProtocolError::TooLong(_) => "too_long",
            ProtocolError::MissingNewline => "missing_newline",
            ProtocolError::Truncated(_) => "truncated",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hello {
    pub node_id: String,
    pub capacity_wh: f64,
    pub initial_mode: ModeId,
    pub class_labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ack {
    pub command_id: u64,
    pub node_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bye {
    pub node_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum WireMessage {
    Hello(Hello),
    Telemetry(TelemetrySample),
    Reconfig(ReconfigCommand),
    Ack(Ack),
    Bye(Bye),
}

const HELLO_FIELDS: &[&str] = &["node_id", "capacity_wh", "initial_mode", "class_labels"];
const TELEMETRY_FIELDS: &[&str] = &[
    "node_id",
    "timestamp_ms",
    "mode",
    "gpu_power_w",
    "device_power_w",
    "temperature_c",
    "fps",
    "battery_pct",
    "label",
    "confidence",
];
const RECONFIG_FIELDS: &[&str] = &["command_id", "node_id", "target_mode", "issued_at_ms"];
const ACK_FIELDS: &[&str] = &["command_id", "node_id"];
const BYE_FIELDS: &[&str] = &["node_id", "reason"];

fn schema(msg_type: &str) -> Option<&'static [&'static str]> {
    Some(match msg_type {
        "hello" => HELLO_FIELDS,
        "telemetry" => TELEMETRY_FIELDS,
        "reconfig" => RECONFIG_FIELDS,
        "ack" => ACK_FIELDS,
        "bye" => BYE_FIELDS,
        _ => return None,
    })
}

impl WireMessage {
    pub fn type_name(&self) -> &'static str {
        match self {
            WireMessage::Hello(_) => "hello",
            WireMessage::Telemetry(_) => "telemetry",
            WireMessage::Reconfig(_) => "reconfig",
            WireMessage::Ack(_) => "ack",
            WireMessage::Bye(_) => "bye",
        }
    }

    pub fn node_id(&self) -> &str {
        match self {
            WireMessage::Hello(m) => &m.node_id,
            WireMessage::Telemetry(m) => &m.node_id,
            WireMessage::Reconfig(m) => &m.node_id,
            WireMessage::Ack(m) => &m.node_id,
            WireMessage::Bye(m) => &m.node_id,
        }
    }

    /// Range and size checks shared by the encoder and decoder.
    pub fn validate(&self) -> Result<(), ProtocolError> {
        check_text("node_id", self.node_id(), 1, MAX_ID_CHARS)?;
        match self {
            WireMessage::Hello(h) => {
                check_real("capacity_wh", h.capacity_wh, f64::MIN_POSITIVE, 1e6)?;
                if h.class_labels.is_empty() || h.class_labels.len() > MAX_CLASS_LABELS {
                    return Err(ProtocolError::OutOfRange {
                        field: "class_labels",
                        reason: format!("{} labels, expected 1..={MAX_CLASS_LABELS}", h.class_labels.len()),
                    });
                }
                for l in &h.class_labels {
                    check_text("class_labels", l, 1, MAX_LABEL_CHARS)?;
                }
            }
            WireMessage::Telemetry(t) => {
                check_real("gpu_power_w", t.gpu_power_w, 0.0, 1000.0)?;
                check_real("device_power_w", t.device_power_w, 0.0, 1000.0)?;
                check_real("temperature_c", t.temperature_c, -100.0, 200.0)?;
                check_real("fps", t.fps, 0.0, 100_000.0)?;
                check_real("battery_pct", t.battery_pct, 0.0, 100.0)?;
                check_text("label", &t.label, 0, MAX_LABEL_CHARS)?;
                check_real("confidence", t.confidence, 0.0, 1.0)?;
            }
            WireMessage::Reconfig(_) | WireMessage::Ack(_) => {}
            WireMessage::Bye(b) => check_text("reason", &b.reason, 0, MAX_LABEL_CHARS)?,
        }
        Ok(())
    }

    /// Copy with every real rounded to six decimals.
    fn quantized(&self) -> WireMessage {
        let mut m = self.clone();
        match &mut m {
            WireMessage::Hello(h) => h.capacity_wh = round6(h.capacity_wh),
            WireMessage::Telemetry(t) => {
                for v in [
                    &mut t.gpu_power_w,
                    &mut t.device_power_w,
                    &mut t.temperature_c,
                    &mut t.fps,
                    &mut t.battery_pct,
                    &mut t.confidence,
                ] {
                    *v = round6(*v);
                }
            }
            _ => {}
        }
        m
    }
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

fn check_real(field: &'static str, v: f64, lo: f64, hi: f64) -> Result<(), ProtocolError> {
    if v.is_finite() && (lo..=hi).contains(&v) {
        Ok(())
    } else {
        Err(ProtocolError::OutOfRange {
            field,
            reason: format!("{v} not within [{lo}, {hi}]"),
        })
    }
}

fn check_text(field: &'static str, s: &str, min: usize, max: usize) -> Result<(), ProtocolError> {
    let n = s.chars().count();
    if n < min || n > max {
        return Err(ProtocolError::OutOfRange {
            field,
            reason: format!("length {n} not within {min}..={max}"),
        });
    }
    if s.chars().any(char::is_control) {
        return Err(ProtocolError::OutOfRange {
            field,
            reason: "contains control characters".into(),
        });
    }
    Ok(())
}

/// Serialize one message as an LF-terminated frame.
pub fn encode(msg: &WireMessage) -> Result<Vec<u8>, ProtocolError> {
    msg.validate()?;
    let mut out = serde_json::to_vec(&msg.quantized()).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    out.push(b'\n');
    if out.len() > MAX_FRAME_BYTES {
        return Err(ProtocolError::TooLong(out.len()));
    }
    Ok(out)
}

/// Parse one complete frame. The trailing LF is required.
pub fn decode(frame: &[u8]) -> Result<WireMessage, ProtocolError> {
    if frame.len() > MAX_FRAME_BYTES {
        return Err(ProtocolError::TooLong(frame.len()));
    }
    let body = frame.strip_suffix(b"\n").ok_or(ProtocolError::MissingNewline)?;
    decode_body(body)
}

fn decode_body(body: &[u8]) -> Result<WireMessage, ProtocolError> {
    match decode_canonical(body) {
        Some(msg) => {
            msg.validate()?;
            Ok(msg)
        }
        None => decode_general(body),
    }
}

/// Fast path for frames laid out the way [`encode`] writes them: `type`
/// first, then exactly the schema fields. Anything else returns `None` and
/// goes through the general path, which also classifies the error.
fn decode_canonical(body: &[u8]) -> Option<WireMessage> {
    fn strict<T: serde::de::DeserializeOwned>(body: &[u8], prefix: &[u8]) -> Option<T> {
        let rest = body.strip_prefix(prefix)?;
        let mut object = Vec::with_capacity(rest.len() + 1);
        object.push(b'{');
        object.extend_from_slice(rest);
        serde_json::from_slice(&object).ok()
    }
    if let Some(m) = strict(body, b"{\"type\":\"telemetry\",") {
        return Some(WireMessage::Telemetry(m));
    }
    if let Some(m) = strict(body, b"{\"type\":\"reconfig\",") {
        return Some(WireMessage::Reconfig(m));
    }
    if let Some(m) = strict(body, b"{\"type\":\"ack\",") {
        return Some(WireMessage::Ack(m));
    }
    if let Some(m) = strict(body, b"{\"type\":\"hello\",") {
        return Some(WireMessage::Hello(m));
    }
    strict(body, b"{\"type\":\"bye\",").map(WireMessage::Bye)
}

fn decode_general(body: &[u8]) -> Result<WireMessage, ProtocolError> {
    let value: Value = serde_json::from_slice(body).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    let Value::Object(obj) = value else {
        return Err(ProtocolError::Malformed("expected a JSON object".into()));
    };
    let msg_type = match obj.get("type") {
        Some(Value::String(t)) => t.clone(),
        Some(_) => return Err(ProtocolError::Malformed("`type` must be a string".into())),
        None => return Err(ProtocolError::Malformed("missing `type`".into())),
    };
    let fields = schema(&msg_type).ok_or_else(|| ProtocolError::UnknownType(msg_type.clone()))?;
    check_closed(&msg_type, &obj, fields)?;
    let msg: WireMessage =
        serde_json::from_value(Value::Object(obj)).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    msg.validate()?;
    Ok(msg)
}

fn check_closed(msg_type: &str, obj: &Map<String, Value>, fields: &[&str]) -> Result<(), ProtocolError> {
    if let Some(extra) = obj.keys().find(|k| k.as_str() != "type" && !fields.contains(&k.as_str())) {
        return Err(ProtocolError::UnknownField {
            msg_type: msg_type.to_string(),
            field: extra.clone(),
        });
    }
    if let Some(missing) = fields.iter().find(|f| !obj.contains_key(**f)) {
        return Err(ProtocolError::MissingField {
            msg_type: msg_type.to_string(),
            field: missing.to_string(),
        });
    }
    Ok(())
}

/// Incremental splitter for a byte stream of frames.
///
/// A bad frame yields one error and is skipped; decoding resumes at the byte
/// after the next LF. Oversized frames are discarded without buffering them.
#[derive(Debug, Default)]
pub struct Framer {
    buf: Vec<u8>,
    overflow: Option<usize>,
}

impl Framer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, mut bytes: &[u8]) -> Vec<Result<WireMessage, ProtocolError>> {
        let mut out = Vec::new();
        while !bytes.is_empty() {
            match bytes.iter().position(|&b| b == b'\n') {
                Some(pos) => {
                    let (line, rest) = bytes.split_at(pos + 1);
                    bytes = rest;
                    if let Some(dropped) = self.overflow.take() {
                        out.push(Err(ProtocolError::TooLong(dropped + line.len())));
                    } else if self.buf.len() + line.len() > MAX_FRAME_BYTES {
                        out.push(Err(ProtocolError::TooLong(self.buf.len() + line.len())));
                        self.buf.clear();
                    } else if self.buf.is_empty() {
                        out.push(decode(line));
                    } else {
                        self.buf.extend_from_slice(line);
                        out.push(decode(&self.buf));
                        self.buf.clear();
                    }
                }
                None => {
                    if let Some(dropped) = self.overflow.as_mut() {
                        *dropped += bytes.len();
                    } else if self.buf.len() + bytes.len() > MAX_FRAME_BYTES {
                        self.overflow = Some(self.buf.len() + bytes.len());
                        self.buf.clear();
                    } else {
                        self.buf.extend_from_slice(bytes);
                    }
                    bytes = &[];
                }
            }
        }
        out
    }

    /// Report a partial frame left at end of stream.
    pub fn finish(&mut self) -> Option<ProtocolError> {
        let pending = self.overflow.take().unwrap_or(self.buf.len());
        self.buf.clear();
        (pending > 0).then_some(ProtocolError::Truncated(pending))
    }
}

/// Blocking frame reader over any byte source, e.g. a `TcpStream`.
pub struct FrameReader<R> {
    inner: R,
    framer: Framer,
    ready: VecDeque<Result<WireMessage, ProtocolError>>,
    done: bool,
}

impl<R: Read> FrameReader<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            framer: Framer::new(),
            ready: VecDeque::new(),
            done: false,
        }
    }

    /// Next decoded frame; `Ok(None)` at clean end of stream. Per-frame
    /// protocol errors are returned inline and do not end the stream.
    pub fn next_message(&mut self) -> io::Result<Option<Result<WireMessage, ProtocolError>>> {
        let mut chunk = [0u8; 4096];
        loop {
            if let Some(m) = self.ready.pop_front() {
                return Ok(Some(m));
            }
            if self.done {
                return Ok(None);
            }
            let n = match self.inner.read(&mut chunk) {
                Ok(n) => n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(e),
            };
            if n == 0 {
                self.done = true;
                if let Some(e) = self.framer.finish() {
                    self.ready.push_back(Err(e));
                }
            } else {
                self.ready.extend(self.framer.push(&chunk[..n]));
            }
        }
    }
}
