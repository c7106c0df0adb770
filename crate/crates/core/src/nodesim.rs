//! Deterministic discrete-event model of one battery-powered edge node.
//!
//! The node runs on a virtual clock with microsecond resolution. Between
//! events the battery drains linearly at the active mode's device power;
//! exhaustion is located exactly rather than at the next tick.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{BatteryState, ModeId, ModeProfile, ModeTable, ReconfigCommand, TelemetrySample};

pub const DEFAULT_INPUT_FPS: f64 = 25.0;
pub const DEFAULT_BATCH_FRAMES: u32 = 64;
pub const DEFAULT_TELEMETRY_PERIOD_MS: u64 = 100;
pub const DEFAULT_BASE_TEMPERATURE_C: f64 = 35.0;

const MICROS_PER_SEC: f64 = 1e6;
const MICROS_PER_HOUR: f64 = 3.6e9;
const DISTRIBUTION_TOLERANCE: f64 = 1e-9;

/// Virtual time in microseconds since the node started.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_millis(ms: u64) -> Self {
        SimTime(ms * 1000)
    }

    pub fn from_secs_f64(s: f64) -> Self {
        SimTime((s * MICROS_PER_SEC).round() as u64)
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / MICROS_PER_SEC
    }

    /// Whole milliseconds, rounded up so a reported time is never early.
    pub fn as_millis_ceil(self) -> u64 {
        self.0.div_ceil(1000)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NodeError {
    #[error("node `{node}`: {reason}")]
    InvalidConfig { node: String, reason: String },
    #[error("node `{node}`: unknown target mode {mode}")]
    UnknownMode { node: String, mode: ModeId },
    #[error("node `{node}`: command addressed to `{addressed}`")]
    WrongNode { node: String, addressed: String },
}

/// Row-stochastic matrix: `rows[i][j]` is the chance of predicting `j` for true class `i`.
pub type ConfusionProfile = Vec<Vec<f64>>;

/// Confusion profile with `accuracy_pct / 100` on the diagonal and the
/// remaining mass spread evenly over the other classes.
pub fn uniform_error_profile(num_classes: usize, accuracy_pct: f64) -> ConfusionProfile {
    let hit = accuracy_pct / 100.0;
    let miss = if num_classes > 1 {
        (1.0 - hit) / (num_classes - 1) as f64
    } else {
        0.0
    };
    (0..num_classes)
        .map(|i| (0..num_classes).map(|j| if i == j { hit } else { miss }).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeConfig {
    pub node_id: String,
    pub initial_mode: ModeId,
    pub battery: BatteryState,
    pub class_labels: Vec<String>,
    pub class_distribution: Vec<f64>,
    pub confusion_profiles: BTreeMap<ModeId, ConfusionProfile>,
    pub input_fps: f64,
    pub batch_frames: u32,
    pub telemetry_period_ms: u64,
    pub switch_latency_s: f64,
    pub rng_seed: u64,
    pub base_temperature_c: f64,
}

impl NodeConfig {
    /// Defaults for everything except identity, battery and workload: uniform
    /// error profiles from each mode's accuracy, 25 fps input, 64-frame
    /// batches, 100 ms telemetry, instant switching.
    pub fn with_defaults(
        node_id: impl Into<String>,
        initial_mode: ModeId,
        battery: BatteryState,
        class_labels: Vec<String>,
        class_distribution: Vec<f64>,
        modes: &ModeTable,
        rng_seed: u64,
    ) -> Self {
        let k = class_labels.len();
        let confusion_profiles = modes
            .iter()
            .map(|p| (p.mode_id, uniform_error_profile(k, p.accuracy_pct)))
            .collect();
        Self {
            node_id: node_id.into(),
            initial_mode,
            battery,
            class_labels,
            class_distribution,
            confusion_profiles,
            input_fps: DEFAULT_INPUT_FPS,
            batch_frames: DEFAULT_BATCH_FRAMES,
            telemetry_period_ms: DEFAULT_TELEMETRY_PERIOD_MS,
            switch_latency_s: 0.0,
            rng_seed,
            base_temperature_c: DEFAULT_BASE_TEMPERATURE_C,
        }
    }

    pub fn validate(&self, modes: &ModeTable) -> Result<(), NodeError> {
        let fail = |reason: String| NodeError::InvalidConfig {
            node: self.node_id.clone(),
            reason,
        };
        let k = self.class_labels.len();
        if k == 0 {
            return Err(fail("no class labels".into()));
        }
        if self.class_distribution.len() != k {
            return Err(fail(format!(
                "class distribution has {} entries for {k} classes",
                self.class_distribution.len()
            )));
        }
        check_distribution(&self.class_distribution).map_err(|e| fail(format!("class distribution {e}")))?;
        if !modes.contains(self.initial_mode) {
            return Err(fail(format!("initial mode {} has no profile", self.initial_mode)));
        }
        for profile in modes.iter() {
            let rows = self
                .confusion_profiles
                .get(&profile.mode_id)
                .ok_or_else(|| fail(format!("no confusion profile for mode {}", profile.mode_id)))?;
            if rows.len() != k || rows.iter().any(|r| r.len() != k) {
                return Err(fail(format!("confusion profile for mode {} is not {k}x{k}", profile.mode_id)));
            }
            for (i, row) in rows.iter().enumerate() {
                check_distribution(row)
                    .map_err(|e| fail(format!("mode {} confusion row {i} {e}", profile.mode_id)))?;
            }
        }
        if !(self.input_fps > 0.0) || self.batch_frames == 0 {
            return Err(fail("input fps and batch size must be positive".into()));
        }
        if self.telemetry_period_ms == 0 {
            return Err(fail("telemetry period must be positive".into()));
        }
        if !(self.switch_latency_s >= 0.0) {
            return Err(fail("switch latency must be >= 0".into()));
        }
        Ok(())
    }

    pub fn batch_period(&self) -> SimTime {
        SimTime::from_secs_f64(self.batch_frames as f64 / self.input_fps)
    }
}

fn check_distribution(p: &[f64]) -> Result<(), String> {
    if p.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err("has entries outside [0, 1]".into());
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE {
        return Err(format!("sums to {sum}, expected 1"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum NodeEvent {
    BatchCompleted {
        at: SimTime,
        true_class: usize,
        predicted_class: usize,
        confidence: f64,
    },
    TelemetryDue {
        at: SimTime,
        sample: TelemetrySample,
    },
    ModeSwitched {
        at: SimTime,
        from: ModeId,
        to: ModeId,
    },
    BatteryExhausted {
        at: SimTime,
    },
}

impl NodeEvent {
    pub fn at(&self) -> SimTime {
        match self {
            NodeEvent::BatchCompleted { at, .. }
            | NodeEvent::TelemetryDue { at, .. }
            | NodeEvent::ModeSwitched { at, .. }
            | NodeEvent::BatteryExhausted { at } => *at,
        }
    }
}

/// Energy drawn while one mode was active.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeSegment {
    pub mode: ModeId,
    pub start: SimTime,
    pub end: SimTime,
    pub power_w: f64,
    pub energy_wh: f64,
}

#[derive(Debug, Clone)]
pub struct NodeSim {
    config: NodeConfig,
    modes: ModeTable,
    batch_period: SimTime,
    telemetry_period: SimTime,
    now: SimTime,
    battery: BatteryState,
    mode: ModeId,
    next_batch: Option<SimTime>,
    next_telemetry: SimTime,
    pending_switch: Option<(SimTime, ModeId)>,
    last_prediction: Option<(usize, f64)>,
    exhausted: bool,
    segments: Vec<ModeSegment>,
    rng: ChaCha8Rng,
}

impl NodeSim {
    pub fn new(config: NodeConfig, modes: ModeTable) -> Result<Self, NodeError> {
        config.validate(&modes)?;
        let batch_period = config.batch_period();
        let telemetry_period = SimTime::from_millis(config.telemetry_period_ms);
        let mode = config.initial_mode;
        let power_w = modes.get(mode).expect("validated").device_power_w;
        Ok(Self {
            batch_period,
            telemetry_period,
            now: SimTime::ZERO,
            battery: config.battery,
            mode,
            next_batch: Some(batch_period),
            next_telemetry: telemetry_period,
            pending_switch: None,
            last_prediction: None,
            exhausted: config.battery.is_empty(),
            segments: vec![ModeSegment {
                mode,
                start: SimTime::ZERO,
                end: SimTime::ZERO,
                power_w,
                energy_wh: 0.0,
            }],
            rng: ChaCha8Rng::seed_from_u64(config.rng_seed),
            config,
            modes,
        })
    }

    pub fn config(&self) -> &NodeConfig {
        &self.config
    }

    pub fn node_id(&self) -> &str {
        &self.config.node_id
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn mode(&self) -> ModeId {
        self.mode
    }

    pub fn battery(&self) -> BatteryState {
        self.battery
    }

    pub fn is_exhausted(&self) -> bool {
        self.exhausted
    }

    pub fn segments(&self) -> &[ModeSegment] {
        &self.segments
    }

    fn profile(&self) -> &ModeProfile {
        self.modes.get(self.mode).expect("active mode has a profile")
    }

    /// Time of the next scheduled event, ignoring battery exhaustion.
    pub fn next_event_time(&self) -> SimTime {
        let mut t = self.next_telemetry;
        if let Some(b) = self.next_batch {
            t = t.min(b);
        }
        if let Some((s, _)) = self.pending_switch {
            t = t.min(s);
        }
        t
    }

    /// Advance the virtual clock to `until` (inclusive), returning every event
    /// in timestamp order. Stops early at battery exhaustion.
    pub fn step(&mut self, until: SimTime) -> Vec<NodeEvent> {
        let mut events = Vec::new();
        while !self.exhausted && self.now < until {
            let target = self.next_event_time().min(until);
            if self.drain_to(target) {
                events.push(NodeEvent::BatteryExhausted { at: self.now });
                break;
            }
            self.fire_due(&mut events);
        }
        events
    }

    /// Drain from `now` to `target`. Returns true if the battery ran out first,
    /// in which case the clock stops at the exact exhaustion time.
    fn drain_to(&mut self, target: SimTime) -> bool {
        let power = self.profile().device_power_w;
        let span_us = target.0 - self.now.0;
        let remaining = self.battery.remaining_wh();
        let to_empty_us = remaining * MICROS_PER_HOUR / power;
        let (span_us, exhausted) = if to_empty_us <= span_us as f64 {
            (to_empty_us.ceil() as u64, true)
        } else {
            (span_us, false)
        };
        let used = if exhausted {
            remaining
        } else {
            power * span_us as f64 / MICROS_PER_HOUR
        };
        self.battery = self.battery.with_remaining(if exhausted { 0.0 } else { remaining - used });
        self.now = SimTime(self.now.0 + span_us);
        let seg = self.segments.last_mut().expect("always one segment");
        seg.end = self.now;
        seg.energy_wh += used;
        if exhausted {
            self.exhausted = true;
            self.next_batch = None;
            self.pending_switch = None;
        }
        exhausted
    }

    fn fire_due(&mut self, events: &mut Vec<NodeEvent>) {
        let now = self.now;
        if let Some((at, to)) = self.pending_switch {
            if at == now {
                self.pending_switch = None;
                events.push(self.switch_now(to));
                self.next_batch = Some(SimTime(now.0 + self.batch_period.0));
            }
        }
        if self.next_batch == Some(now) {
            let true_class = self.draw_class();
            let (predicted_class, confidence) = self.synth_classify(true_class);
            self.last_prediction = Some((predicted_class, confidence));
            events.push(NodeEvent::BatchCompleted {
                at: now,
                true_class,
                predicted_class,
                confidence,
            });
            self.next_batch = Some(SimTime(now.0 + self.batch_period.0));
        }
        if self.next_telemetry == now {
            events.push(NodeEvent::TelemetryDue {
                at: now,
                sample: self.telemetry_sample(),
            });
            self.next_telemetry = SimTime(now.0 + self.telemetry_period.0);
        }
    }

    fn switch_now(&mut self, to: ModeId) -> NodeEvent {
        let from = self.mode;
        self.mode = to;
        self.segments.push(ModeSegment {
            mode: to,
            start: self.now,
            end: self.now,
            power_w: self.profile().device_power_w,
            energy_wh: 0.0,
        });
        NodeEvent::ModeSwitched { at: self.now, from, to }
    }

    fn draw_class(&mut self) -> usize {
        let u: f64 = self.rng.gen();
        sample_index(&self.config.class_distribution, u)
    }

    /// Draw a prediction for `true_class` from the active mode's confusion row.
    /// Confidence is uniform in [0.5, 1.0] when the draw hits the row's most
    /// likely class and uniform in [0.2, 0.8] otherwise.
    pub fn synth_classify(&mut self, true_class: usize) -> (usize, f64) {
        let row = &self.config.confusion_profiles[&self.mode][true_class];
        let u: f64 = self.rng.gen();
        let predicted = sample_index(row, u);
        let likeliest = row
            .iter()
            .enumerate()
            .fold(0, |best, (j, &p)| if p > row[best] { j } else { best });
        let confidence = if predicted == likeliest {
            self.rng.gen_range(0.5..=1.0)
        } else {
            self.rng.gen_range(0.2..=0.8)
        };
        (predicted, confidence)
    }

    /// Telemetry snapshot at the current virtual time. Reals are rounded to
    /// six decimals so they survive the wire format unchanged.
    pub fn telemetry_sample(&self) -> TelemetrySample {
        let p = self.profile();
        let switching = self.pending_switch.is_some();
        let (label, confidence) = match self.last_prediction {
            Some((c, conf)) => (self.config.class_labels[c].clone(), conf),
            None => (String::new(), 0.0),
        };
        TelemetrySample {
            node_id: self.config.node_id.clone(),
            timestamp_ms: self.now.as_millis_ceil(),
            mode: self.mode,
            gpu_power_w: round6(p.gpu_power_w),
            device_power_w: round6(p.device_power_w),
            temperature_c: round6(self.config.base_temperature_c + 4.0 * p.gpu_power_w),
            fps: if switching || self.exhausted { 0.0 } else { round6(p.throughput_fps) },
            battery_pct: round6(self.battery.percentage()),
            label,
            confidence: round6(confidence),
        }
    }

    /// Handle a reconfiguration command received at the current virtual time.
    ///
    /// With zero latency the switch is immediate and its event is returned.
    /// Otherwise inference pauses, the old mode keeps draining, and the
    /// `ModeSwitched` event comes out of a later [`step`](Self::step).
    pub fn apply_reconfig(&mut self, cmd: &ReconfigCommand) -> Result<Option<NodeEvent>, NodeError> {
        if cmd.node_id != self.config.node_id {
            return Err(NodeError::WrongNode {
                node: self.config.node_id.clone(),
                addressed: cmd.node_id.clone(),
            });
        }
        if !self.modes.contains(cmd.target_mode) {
            return Err(NodeError::UnknownMode {
                node: self.config.node_id.clone(),
                mode: cmd.target_mode,
            });
        }
        if self.exhausted {
            return Ok(None);
        }
        let heading_to = self.pending_switch.map(|(_, m)| m).unwrap_or(self.mode);
        if cmd.target_mode == heading_to {
            return Ok(None);
        }
        if self.config.switch_latency_s == 0.0 {
            self.pending_switch = None;
            return Ok(Some(self.switch_now(cmd.target_mode)));
        }
        let done = SimTime(self.now.0 + SimTime::from_secs_f64(self.config.switch_latency_s).0);
        self.pending_switch = Some((done, cmd.target_mode));
        self.next_batch = None;
        Ok(None)
    }
}

fn sample_index(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding slack above the cumulative sum
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

pub(crate) fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}
