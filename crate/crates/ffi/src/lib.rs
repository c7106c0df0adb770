//! C ABI for the qrm-edge runtime.
//!
//! Every function returns a [`QrmStatus`]; on failure a description is kept
//! per thread and can be read with [`qrm_last_error_message`]. Objects are
//! exposed as opaque handles that the caller releases with the matching
//! `*_free` function. No function unwinds across the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use qrm_edge::config::{ConfigError, Scenario, ScenarioConfig};
use qrm_edge::domain::{ConfusionMatrix, ModeId, TelemetrySample};
use qrm_edge::energy::{evaluate_policy, extension_ratio};
use qrm_edge::metrics::{macro_metrics, time_weighted_f1, TimedSegment};
use qrm_edge::protocol::{self, ProtocolError, WireMessage};
use qrm_edge::qrm::log::{NdjsonSink, NullSink};
use qrm_edge::qrm::{Collector, LogSink};

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QrmStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Configuration could not be read, parsed or validated.
    ConfigError = 3,
    UnknownPolicy = 4,
    /// A frame failed to decode or a message failed to encode.
    ProtocolError = 5,
    /// Invalid input to a metrics or energy computation.
    InvalidInput = 6,
    /// The collector refused a message (unregistered node, stray ack, ...).
    CollectorError = 7,
    /// The output buffer is too small; the required size was written back.
    BufferTooSmall = 8,
    Io = 9,
    /// An internal panic was caught at the boundary.
    Panic = 10,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn fail(status: QrmStatus, msg: impl Into<String>) -> QrmStatus {
    set_error(msg);
    status
}

/// Run `f`, clearing the last error on success and converting panics.
fn guard(f: impl FnOnce() -> Result<(), (QrmStatus, String)>) -> QrmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            QrmStatus::Ok
        }
        Ok(Err((status, msg))) => fail(status, msg),
        Err(_) => fail(QrmStatus::Panic, "internal panic"),
    }
}

type FfiResult<T> = Result<T, (QrmStatus, String)>;

fn config_err(e: ConfigError) -> (QrmStatus, String) {
    let status = match e {
        ConfigError::UnknownPolicy(_) => QrmStatus::UnknownPolicy,
        ConfigError::Io { .. } => QrmStatus::Io,
        _ => QrmStatus::ConfigError,
    };
    (status, e.to_string())
}

fn protocol_err(e: ProtocolError) -> (QrmStatus, String) {
    (QrmStatus::ProtocolError, e.to_string())
}

fn null(name: &str) -> (QrmStatus, String) {
    (QrmStatus::NullArgument, format!("`{name}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (QrmStatus::InvalidUtf8, format!("`{name}` is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> FfiResult<&'a mut T> {
    p.as_mut().ok_or_else(|| null(name))
}

/// Copy `bytes` into the caller's buffer, reporting the size either way.
unsafe fn copy_out(bytes: &[u8], buf: *mut u8, cap: usize, written: *mut usize) -> FfiResult<()> {
    let written = out_arg(written, "written")?;
    *written = bytes.len();
    if bytes.len() > cap {
        return Err((
            QrmStatus::BufferTooSmall,
            format!("need {} bytes, buffer holds {cap}", bytes.len()),
        ));
    }
    if !bytes.is_empty() {
        if buf.is_null() {
            return Err(null("buf"));
        }
        ptr::copy_nonoverlapping(bytes.as_ptr(), buf, bytes.len());
    }
    Ok(())
}

/// Description of the last failure on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn qrm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn qrm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// ---------------------------------------------------------------- config

/// Validated scenario configuration (modes, policies, nodes, classes).
pub struct QrmConfig {
    scenario: Scenario,
}

fn config_handle(config: ScenarioConfig, out: *mut *mut QrmConfig) -> FfiResult<()> {
    let out = unsafe { out_arg(out, "out")? };
    let scenario = config.resolve().map_err(config_err)?;
    *out = Box::into_raw(Box::new(QrmConfig { scenario }));
    Ok(())
}

/// The built-in scenarios.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn qrm_config_builtin(out: *mut *mut QrmConfig) -> QrmStatus {
    guard(|| config_handle(ScenarioConfig::builtin(), out))
}

/// Parse a TOML configuration from a NUL-terminated string.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn qrm_config_from_toml(toml: *const c_char, out: *mut *mut QrmConfig) -> QrmStatus {
    guard(|| {
        let text = str_arg(toml, "toml")?;
        config_handle(ScenarioConfig::from_toml_str(text).map_err(config_err)?, out)
    })
}

/// Load a TOML configuration file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn qrm_config_load(path: *const c_char, out: *mut *mut QrmConfig) -> QrmStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        config_handle(ScenarioConfig::load(Path::new(path)).map_err(config_err)?, out)
    })
}

/// Release a configuration. Null is ignored.
///
/// # Safety
/// `config` must come from a `qrm_config_*` constructor and not be used again.
#[no_mangle]
pub unsafe extern "C" fn qrm_config_free(config: *mut QrmConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

// ---------------------------------------------------------------- energy

/// Closed-form outcome of running a policy on a full battery.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct QrmScenarioResult {
    pub total_working_time_s: f64,
    pub weighted_f1_pct: f64,
    pub reconfiguration_count: u32,
}

/// Evaluate a named policy at the configured battery capacity.
///
/// # Safety
/// `config` must be a live handle, `policy` a NUL-terminated string and
/// `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn qrm_evaluate_policy(
    config: *const QrmConfig,
    policy: *const c_char,
    out: *mut QrmScenarioResult,
) -> QrmStatus {
    guard(|| {
        let s = &config.as_ref().ok_or_else(|| null("config"))?.scenario;
        let name = str_arg(policy, "policy")?;
        let out = out_arg(out, "out")?;
        let p = s.policy(name).map_err(config_err)?;
        let r = evaluate_policy(p, &s.modes, s.config.capacity_wh)
            .map_err(|e| (QrmStatus::InvalidInput, e.to_string()))?;
        *out = QrmScenarioResult {
            total_working_time_s: r.total_working_time_s,
            weighted_f1_pct: r.weighted_f1_pct,
            reconfiguration_count: r.reconfiguration_count as u32,
        };
        Ok(())
    })
}

/// Working-time extension of `policy` over `baseline`, in percent.
///
/// # Safety
/// As for [`qrm_evaluate_policy`].
#[no_mangle]
pub unsafe extern "C" fn qrm_extension_ratio(
    config: *const QrmConfig,
    policy: *const c_char,
    baseline: *const c_char,
    out_pct: *mut f64,
) -> QrmStatus {
    guard(|| {
        let s = &config.as_ref().ok_or_else(|| null("config"))?.scenario;
        let out = out_arg(out_pct, "out_pct")?;
        let eval = |name: &str| {
            let p = s.policy(name).map_err(config_err)?;
            evaluate_policy(p, &s.modes, s.config.capacity_wh).map_err(|e| (QrmStatus::InvalidInput, e.to_string()))
        };
        let r = eval(str_arg(policy, "policy")?)?;
        let b = eval(str_arg(baseline, "baseline")?)?;
        *out = extension_ratio(&r, &b).map_err(|e| (QrmStatus::InvalidInput, e.to_string()))?;
        Ok(())
    })
}

// ---------------------------------------------------------------- metrics

/// Macro-averaged precision, recall and F1, plus accuracy, all in [0, 1].
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct QrmMacroMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

/// Metrics of a `k` x `k` confusion matrix given row-major, rows indexed by
/// true class.
///
/// # Safety
/// `counts` must point to `k * k` values and `out` be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn qrm_macro_metrics(counts: *const u64, k: usize, out: *mut QrmMacroMetrics) -> QrmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let n = k.checked_mul(k).ok_or((QrmStatus::InvalidInput, "k too large".to_string()))?;
        let flat = slice_arg(counts, n, "counts")?;
        let rows: Vec<Vec<u64>> = flat.chunks(k.max(1)).map(<[u64]>::to_vec).collect();
        let cm = ConfusionMatrix::from_rows(&rows).map_err(|e| (QrmStatus::InvalidInput, e.to_string()))?;
        let m = macro_metrics(&cm).map_err(|e| (QrmStatus::InvalidInput, e.to_string()))?;
        *out = QrmMacroMetrics {
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            accuracy: m.accuracy,
        };
        Ok(())
    })
}

/// Duration-weighted mean of per-segment F1 scores.
///
/// # Safety
/// `durations_s` and `f1_pct` must each point to `n` values; `out` must be
/// valid for writes.
#[no_mangle]
pub unsafe extern "C" fn qrm_time_weighted_f1(
    durations_s: *const f64,
    f1_pct: *const f64,
    n: usize,
    out: *mut f64,
) -> QrmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let d = slice_arg(durations_s, n, "durations_s")?;
        let f = slice_arg(f1_pct, n, "f1_pct")?;
        let segments: Vec<TimedSegment> = d
            .iter()
            .zip(f)
            .map(|(&duration_s, &f1_pct)| TimedSegment { duration_s, f1_pct })
            .collect();
        *out = time_weighted_f1(&segments).map_err(|e| (QrmStatus::InvalidInput, e.to_string()))?;
        Ok(())
    })
}

// ---------------------------------------------------------------- protocol

/// One decoded wire message.
pub struct QrmMessage {
    inner: WireMessage,
}

/// Fields of a telemetry message. Strings are NUL-terminated UTF-8.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct QrmTelemetry {
    pub node_id: *const c_char,
    pub timestamp_ms: u64,
    pub mode: u8,
    pub gpu_power_w: f64,
    pub device_power_w: f64,
    pub temperature_c: f64,
    pub fps: f64,
    pub battery_pct: f64,
    /// Latest recognized action; may be null for none.
    pub label: *const c_char,
    pub confidence: f64,
}

fn message_handle(inner: WireMessage, out: *mut *mut QrmMessage) -> FfiResult<()> {
    let out = unsafe { out_arg(out, "out")? };
    *out = Box::into_raw(Box::new(QrmMessage { inner }));
    Ok(())
}

/// Decode one LF-terminated frame.
///
/// # Safety
/// `frame` must point to `len` bytes and `out` be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn qrm_message_decode(frame: *const u8, len: usize, out: *mut *mut QrmMessage) -> QrmStatus {
    guard(|| {
        let bytes = slice_arg(frame, len, "frame")?;
        let msg = protocol::decode(bytes).map_err(protocol_err)?;
        message_handle(msg, out)
    })
}

/// Build a telemetry message; it is validated when encoded.
///
/// # Safety
/// `telemetry` must be valid for reads with live string pointers; `out`
/// must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn qrm_message_new_telemetry(
    telemetry: *const QrmTelemetry,
    out: *mut *mut QrmMessage,
) -> QrmStatus {
    guard(|| {
        let t = telemetry.as_ref().ok_or_else(|| null("telemetry"))?;
        let label = if t.label.is_null() { "" } else { str_arg(t.label, "label")? };
        let sample = TelemetrySample {
            node_id: str_arg(t.node_id, "node_id")?.to_string(),
            timestamp_ms: t.timestamp_ms,
            mode: ModeId(t.mode),
            gpu_power_w: t.gpu_power_w,
            device_power_w: t.device_power_w,
            temperature_c: t.temperature_c,
            fps: t.fps,
            battery_pct: t.battery_pct,
            label: label.to_string(),
            confidence: t.confidence,
        };
        message_handle(WireMessage::Telemetry(sample), out)
    })
}

/// Encode a message as an LF-terminated frame into `buf`. `written` receives
/// the frame length, also when the buffer is too small.
///
/// # Safety
/// `msg` must be a live handle, `buf` valid for `cap` bytes, `written` valid
/// for writes.
#[no_mangle]
pub unsafe extern "C" fn qrm_message_encode(
    msg: *const QrmMessage,
    buf: *mut u8,
    cap: usize,
    written: *mut usize,
) -> QrmStatus {
    guard(|| {
        let msg = msg.as_ref().ok_or_else(|| null("msg"))?;
        let frame = protocol::encode(&msg.inner).map_err(protocol_err)?;
        copy_out(&frame, buf, cap, written)
    })
}

/// Message type (`hello`, `telemetry`, `reconfig`, `ack` or `bye`) as a
/// static string; null for a null handle.
///
/// # Safety
/// `msg` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn qrm_message_type(msg: *const QrmMessage) -> *const c_char {
    let Some(msg) = msg.as_ref() else { return ptr::null() };
    let name: &'static [u8] = match msg.inner {
        WireMessage::Hello(_) => b"hello\0",
        WireMessage::Telemetry(_) => b"telemetry\0",
        WireMessage::Reconfig(_) => b"reconfig\0",
        WireMessage::Ack(_) => b"ack\0",
        WireMessage::Bye(_) => b"bye\0",
    };
    name.as_ptr().cast()
}

/// Read the fields of a reconfiguration command.
///
/// # Safety
/// `msg` must be a live handle; outputs must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn qrm_message_reconfig(
    msg: *const QrmMessage,
    command_id: *mut u64,
    target_mode: *mut u8,
    issued_at_ms: *mut u64,
) -> QrmStatus {
    guard(|| {
        let msg = msg.as_ref().ok_or_else(|| null("msg"))?;
        let WireMessage::Reconfig(cmd) = &msg.inner else {
            return Err((QrmStatus::InvalidInput, format!("message is `{}`", msg.inner.type_name())));
        };
        *out_arg(command_id, "command_id")? = cmd.command_id;
        *out_arg(target_mode, "target_mode")? = cmd.target_mode.0;
        *out_arg(issued_at_ms, "issued_at_ms")? = cmd.issued_at_ms;
        Ok(())
    })
}

/// Release a message. Null is ignored.
///
/// # Safety
/// `msg` must come from a `qrm_message_*` constructor and not be used again.
#[no_mangle]
pub unsafe extern "C" fn qrm_message_free(msg: *mut QrmMessage) {
    if !msg.is_null() {
        drop(Box::from_raw(msg));
    }
}

// ---------------------------------------------------------------- collector

/// Policy engine and registry for a fleet of nodes.
pub struct QrmCollector {
    inner: Collector,
}

/// Create a collector using the configuration's policies. With a non-null
/// `log_path` the monitoring log is appended there as NDJSON.
///
/// # Safety
/// `config` must be a live handle, `log_path` null or a NUL-terminated
/// string, `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn qrm_collector_new(
    config: *const QrmConfig,
    log_path: *const c_char,
    out: *mut *mut QrmCollector,
) -> QrmStatus {
    guard(|| {
        let s = &config.as_ref().ok_or_else(|| null("config"))?.scenario;
        let out = out_arg(out, "out")?;
        let nodes = s.node_configs(None, None, None).map_err(config_err)?;
        let assignment = s.policy_assignment(&nodes).map_err(config_err)?;
        let sink: Box<dyn LogSink> = if log_path.is_null() {
            Box::new(NullSink)
        } else {
            let path = str_arg(log_path, "log_path")?;
            Box::new(NdjsonSink::append_to(Path::new(path)).map_err(|e| (QrmStatus::Io, format!("{path}: {e}")))?)
        };
        let inner = Collector::new(assignment, s.collector_settings(), sink);
        *out = Box::into_raw(Box::new(QrmCollector { inner }));
        Ok(())
    })
}

/// Feed one inbound frame. Replies for the sending node (zero or more
/// LF-terminated frames) are written to `reply_buf`; `written` receives
/// their total length. If the buffer is too small the replies are lost, so
/// size it for at least one maximal frame (1024 bytes).
///
/// # Safety
/// `collector` must be a live handle, `frame` valid for `len` bytes,
/// `reply_buf` valid for `cap` bytes and `written` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn qrm_collector_handle_frame(
    collector: *mut QrmCollector,
    frame: *const u8,
    len: usize,
    wall_ms: u64,
    reply_buf: *mut u8,
    cap: usize,
    written: *mut usize,
) -> QrmStatus {
    guard(|| {
        let c = collector.as_mut().ok_or_else(|| null("collector"))?;
        let bytes = slice_arg(frame, len, "frame")?;
        if !written.is_null() {
            *written = 0;
        }
        let replies = c.inner.handle_frame(bytes, wall_ms).map_err(|e| match e {
            qrm_edge::qrm::QrmError::Protocol(p) => protocol_err(p),
            qrm_edge::qrm::QrmError::Log(io) => (QrmStatus::Io, io.to_string()),
            other => (QrmStatus::CollectorError, other.to_string()),
        })?;
        let mut out = Vec::new();
        for r in &replies {
            out.extend(protocol::encode(r).map_err(protocol_err)?);
        }
        copy_out(&out, reply_buf, cap, written)
    })
}

/// Number of monitoring-log entries written so far.
///
/// # Safety
/// `collector` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn qrm_collector_log_len(collector: *const QrmCollector) -> u64 {
    collector.as_ref().map_or(0, |c| c.inner.log_len())
}

/// Flush the log and release the collector. Null is ignored.
///
/// # Safety
/// `collector` must come from [`qrm_collector_new`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn qrm_collector_free(collector: *mut QrmCollector) {
    if !collector.is_null() {
        let mut c = Box::from_raw(collector);
        let _ = c.inner.flush();
    }
}
