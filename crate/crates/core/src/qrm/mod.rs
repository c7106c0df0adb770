//! Quality and resource management: the collector's per-node registry and
//! the battery-band decision rule that drives reconfiguration.

pub mod log;
pub mod summary;

use std::collections::{BTreeMap, VecDeque};
use std::io;

use thiserror::Error;

use crate::domain::{ModeId, Policy, ReconfigCommand, TelemetrySample};
use crate::protocol::{self, Ack, Bye, Hello, ProtocolError, WireMessage};

pub use log::{Direction, LogSink, MonitoringLog, MonitoringLogEntry};
pub use summary::{summarize, NodeSummary, Summarizer, Summary};

pub const DEFAULT_RETRY_TIMEOUT_MS: u64 = 5_000;
pub const DEFAULT_ENERGY_WINDOW_MS: u64 = 60_000;

#[derive(Debug, Error)]
pub enum QrmError {
    #[error("message from unregistered node `{0}`")]
    Unregistered(String),
    #[error("nodes may not send `{0}` messages")]
    UnexpectedMessage(&'static str),
    #[error("ack for command {got} from `{node}` does not match the pending command")]
    StrayAck { node: String, got: u64 },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("monitoring log: {0}")]
    Log(#[from] io::Error),
}

/// Mode to switch to at `battery_pct`, if any.
///
/// Returns the policy's band mode when it differs from `current_mode` and no
/// command is outstanding. Transitions only move to later (lower-charge)
/// bands than the first band in which `current_mode` is active, so a node is
/// never sent back to a higher-power band.
pub fn decide(battery_pct: f64, current_mode: ModeId, policy: &Policy, pending: bool) -> Option<ModeId> {
    if pending {
        return None;
    }
    let idx = policy.band_index(battery_pct).ok()?;
    let target = policy.bands[idx].mode;
    if target == current_mode {
        return None;
    }
    match policy.first_band_of(current_mode) {
        Some(current_idx) if idx <= current_idx => None,
        _ => Some(target),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PendingCommand {
    pub command: ReconfigCommand,
    pub sent_at_ms: u64,
}

/// What the collector knows about one node.
#[derive(Debug, Clone)]
pub struct NodeEntry {
    pub hello: Hello,
    pub policy: Policy,
    pub current_mode: ModeId,
    pub last_sample: Option<TelemetrySample>,
    pub last_command_id: u64,
    pub pending: Option<PendingCommand>,
    pub connected: bool,
    last_virtual_ms: u64,
    power_window: VecDeque<(u64, f64)>,
    power_window_sum: f64,
}

impl NodeEntry {
    /// Mean device power over the sliding window ending at the latest sample.
    pub fn average_power_w(&self) -> Option<f64> {
        (!self.power_window.is_empty()).then(|| self.power_window_sum / self.power_window.len() as f64)
    }

    fn record_power(&mut self, at_ms: u64, watts: f64, window_ms: u64) {
        self.power_window.push_back((at_ms, watts));
        self.power_window_sum += watts;
        while let Some(&(t, w)) = self.power_window.front() {
            if at_ms.saturating_sub(t) <= window_ms {
                break;
            }
            self.power_window.pop_front();
            self.power_window_sum -= w;
        }
    }
}

/// Picks the policy for a node when it registers.
#[derive(Debug, Clone)]
pub struct PolicyAssignment {
    pub default: Policy,
    pub per_node: BTreeMap<String, Policy>,
}

impl PolicyAssignment {
    pub fn uniform(policy: Policy) -> Self {
        Self {
            default: policy,
            per_node: BTreeMap::new(),
        }
    }

    pub fn for_node(&self, node_id: &str) -> &Policy {
        self.per_node.get(node_id).unwrap_or(&self.default)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CollectorSettings {
    pub retry_timeout_ms: u64,
    pub energy_window_ms: u64,
}

impl Default for CollectorSettings {
    fn default() -> Self {
        Self {
            retry_timeout_ms: DEFAULT_RETRY_TIMEOUT_MS,
            energy_window_ms: DEFAULT_ENERGY_WINDOW_MS,
        }
    }
}

/// Registry plus decision engine. Every inbound message is logged before it
/// is acted on, and every command is logged before it is returned for sending.
pub struct Collector {
    policies: PolicyAssignment,
    settings: CollectorSettings,
    registry: BTreeMap<String, NodeEntry>,
    log: MonitoringLog,
}

impl Collector {
    pub fn new(policies: PolicyAssignment, settings: CollectorSettings, sink: Box<dyn LogSink>) -> Self {
        Self {
            policies,
            settings,
            registry: BTreeMap::new(),
            log: MonitoringLog::new(sink),
        }
    }

    pub fn node(&self, node_id: &str) -> Option<&NodeEntry> {
        self.registry.get(node_id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeEntry> {
        self.registry.values()
    }

    pub fn log_len(&self) -> u64 {
        self.log.len()
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.log.flush()
    }

    /// Decode one frame and handle it.
    pub fn handle_frame(&mut self, frame: &[u8], wall_ms: u64) -> Result<Vec<WireMessage>, QrmError> {
        let msg = protocol::decode(frame)?;
        self.handle(msg, wall_ms)
    }

    /// Handle one inbound message, returning the messages to send back to
    /// the same node.
    pub fn handle(&mut self, msg: WireMessage, wall_ms: u64) -> Result<Vec<WireMessage>, QrmError> {
        match msg {
            WireMessage::Hello(hello) => {
                self.register(hello, wall_ms)?;
                Ok(Vec::new())
            }
            WireMessage::Telemetry(sample) => Ok(self
                .ingest(sample, wall_ms)?
                .into_iter()
                .map(WireMessage::Reconfig)
                .collect()),
            WireMessage::Ack(ack) => {
                self.acknowledge(ack, wall_ms)?;
                Ok(Vec::new())
            }
            WireMessage::Bye(bye) => {
                self.farewell(bye, wall_ms)?;
                Ok(Vec::new())
            }
            WireMessage::Reconfig(cmd) => {
                let virtual_ms = self.virtual_now(&cmd.node_id);
                self.log.append(
                    wall_ms,
                    virtual_ms,
                    Direction::In,
                    WireMessage::Reconfig(cmd),
                    Some("unexpected".into()),
                )?;
                Err(QrmError::UnexpectedMessage("reconfig"))
            }
        }
    }

    fn virtual_now(&self, node_id: &str) -> u64 {
        self.registry.get(node_id).map_or(0, |e| e.last_virtual_ms)
    }

    fn register(&mut self, hello: Hello, wall_ms: u64) -> Result<(), QrmError> {
        self.log.append(wall_ms, 0, Direction::In, WireMessage::Hello(hello.clone()), None)?;
        let policy = self.policies.for_node(&hello.node_id).clone();
        // a reconnecting node keeps its command numbering
        let last_command_id = self.registry.get(&hello.node_id).map_or(0, |e| e.last_command_id);
        self.registry.insert(
            hello.node_id.clone(),
            NodeEntry {
                current_mode: hello.initial_mode,
                hello,
                policy,
                last_sample: None,
                last_command_id,
                pending: None,
                connected: true,
                last_virtual_ms: 0,
                power_window: VecDeque::new(),
                power_window_sum: 0.0,
            },
        );
        Ok(())
    }

    /// Update the registry from one telemetry sample and return any command
    /// to issue.
    pub fn ingest(&mut self, sample: TelemetrySample, wall_ms: u64) -> Result<Vec<ReconfigCommand>, QrmError> {
        let Some(entry) = self.registry.get_mut(&sample.node_id) else {
            let node = sample.node_id.clone();
            self.log.append(
                wall_ms,
                sample.timestamp_ms,
                Direction::In,
                WireMessage::Telemetry(sample),
                Some("unregistered node".into()),
            )?;
            return Err(QrmError::Unregistered(node));
        };
        self.log
            .append(wall_ms, sample.timestamp_ms, Direction::In, WireMessage::Telemetry(sample.clone()), None)?;

        let now = sample.timestamp_ms;
        entry.last_virtual_ms = entry.last_virtual_ms.max(now);
        entry.current_mode = sample.mode;
        entry.record_power(now, sample.device_power_w, self.settings.energy_window_ms);

        let mut expired = false;
        if let Some(p) = &entry.pending {
            if now.saturating_sub(p.sent_at_ms) >= self.settings.retry_timeout_ms {
                expired = true;
            }
        }
        if expired {
            entry.pending = None;
        }
        let battery_pct = sample.battery_pct;
        entry.last_sample = Some(sample);
        if battery_pct <= 0.0 {
            return Ok(Vec::new());
        }
        let Some(target) = decide(battery_pct, entry.current_mode, &entry.policy, entry.pending.is_some()) else {
            return Ok(Vec::new());
        };
        entry.last_command_id += 1;
        let cmd = ReconfigCommand {
            command_id: entry.last_command_id,
            node_id: entry.hello.node_id.clone(),
            target_mode: target,
            issued_at_ms: now,
        };
        entry.pending = Some(PendingCommand {
            command: cmd.clone(),
            sent_at_ms: now,
        });
        self.log.append(wall_ms, now, Direction::Out, WireMessage::Reconfig(cmd.clone()), None)?;
        Ok(vec![cmd])
    }

    fn acknowledge(&mut self, ack: Ack, wall_ms: u64) -> Result<(), QrmError> {
        let virtual_ms = self.virtual_now(&ack.node_id);
        let Some(entry) = self.registry.get_mut(&ack.node_id) else {
            let node = ack.node_id.clone();
            self.log
                .append(wall_ms, virtual_ms, Direction::In, WireMessage::Ack(ack), Some("unregistered node".into()))?;
            return Err(QrmError::Unregistered(node));
        };
        let matches = entry.pending.as_ref().is_some_and(|p| p.command.command_id == ack.command_id);
        let (node, got) = (ack.node_id.clone(), ack.command_id);
        self.log.append(
            wall_ms,
            virtual_ms,
            Direction::In,
            WireMessage::Ack(ack),
            (!matches).then(|| "no matching pending command".into()),
        )?;
        if !matches {
            return Err(QrmError::StrayAck { node, got });
        }
        let pending = entry.pending.take().expect("matched");
        entry.current_mode = pending.command.target_mode;
        Ok(())
    }

    fn farewell(&mut self, bye: Bye, wall_ms: u64) -> Result<(), QrmError> {
        let virtual_ms = self.virtual_now(&bye.node_id);
        let known = self.registry.contains_key(&bye.node_id);
        let node = bye.node_id.clone();
        self.log.append(
            wall_ms,
            virtual_ms,
            Direction::In,
            WireMessage::Bye(bye),
            (!known).then(|| "unregistered node".into()),
        )?;
        match self.registry.get_mut(&node) {
            Some(e) => {
                e.connected = false;
                e.pending = None;
                Ok(())
            }
            None => Err(QrmError::Unregistered(node)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Band;

    fn policy(name: &str, m: [u8; 3]) -> Policy {
        Policy {
            name: name.into(),
            bands: vec![
                Band { lower_pct: 50.0, upper_pct: 100.0, mode: ModeId(m[0]) },
                Band { lower_pct: 25.0, upper_pct: 50.0, mode: ModeId(m[1]) },
                Band { lower_pct: 0.0, upper_pct: 25.0, mode: ModeId(m[2]) },
            ],
        }
    }

    fn hello(id: &str, mode: u8) -> WireMessage {
        WireMessage::Hello(Hello {
            node_id: id.into(),
            capacity_wh: 47.7,
            initial_mode: ModeId(mode),
            class_labels: vec!["a".into()],
        })
    }

    fn sample(id: &str, t: u64, mode: u8, pct: f64) -> TelemetrySample {
        TelemetrySample {
            node_id: id.into(),
            timestamp_ms: t,
            mode: ModeId(mode),
            gpu_power_w: 1.0,
            device_power_w: 4.0,
            temperature_c: 40.0,
            fps: 30.0,
            battery_pct: pct,
            label: String::new(),
            confidence: 0.0,
        }
    }

    #[test]
    fn decide_examples() {
        let s7 = policy("scenario7", [0, 1, 2]);
        assert_eq!(decide(60.0, ModeId(0), &s7, false), None);
        assert_eq!(decide(49.0, ModeId(0), &s7, false), Some(ModeId(1)));
        assert_eq!(decide(20.0, ModeId(1), &s7, false), Some(ModeId(2)));
        assert_eq!(decide(49.0, ModeId(1), &s7, true), None);
        // never back to a higher band
        assert_eq!(decide(80.0, ModeId(2), &s7, false), None);
        assert_eq!(decide(40.0, ModeId(2), &s7, false), None);
        // a mode the policy never uses is moved onto the policy
        let s3 = policy("scenario3", [2, 2, 2]);
        assert_eq!(decide(90.0, ModeId(0), &s3, false), Some(ModeId(2)));
    }

    #[test]
    fn single_command_per_crossing() {
        let mut c = Collector::new(
            PolicyAssignment::uniform(policy("scenario4", [0, 1, 1])),
            CollectorSettings::default(),
            Box::new(Vec::new()),
        );
        c.handle(hello("n1", 0), 0).unwrap();
        assert!(c.ingest(sample("n1", 100, 0, 100.0), 0).unwrap().is_empty());
        let cmds = c.ingest(sample("n1", 200, 0, 49.99), 0).unwrap();
        assert_eq!(cmds.len(), 1);
        assert_eq!(cmds[0].target_mode, ModeId(1));
        assert_eq!(cmds[0].command_id, 1);
        // still pending: nothing new
        assert!(c.ingest(sample("n1", 300, 0, 49.98), 0).unwrap().is_empty());
        c.handle(WireMessage::Ack(Ack { command_id: 1, node_id: "n1".into() }), 0).unwrap();
        for t in 4..50 {
            assert!(c.ingest(sample("n1", t * 100, 1, 49.0 - t as f64), 0).unwrap().is_empty());
        }
    }

    #[test]
    fn unacknowledged_command_is_retried_after_timeout() {
        let mut c = Collector::new(
            PolicyAssignment::uniform(policy("scenario7", [0, 1, 2])),
            CollectorSettings { retry_timeout_ms: 1_000, ..Default::default() },
            Box::new(Vec::new()),
        );
        c.handle(hello("n1", 0), 0).unwrap();
        assert_eq!(c.ingest(sample("n1", 100, 0, 49.0), 0).unwrap().len(), 1);
        assert!(c.ingest(sample("n1", 1_000, 0, 48.9), 0).unwrap().is_empty());
        let retry = c.ingest(sample("n1", 1_100, 0, 48.8), 0).unwrap();
        assert_eq!(retry.len(), 1);
        assert_eq!(retry[0].command_id, 2);
        // the first command is stale now
        assert!(matches!(
            c.handle(WireMessage::Ack(Ack { command_id: 1, node_id: "n1".into() }), 0),
            Err(QrmError::StrayAck { .. })
        ));
    }

    #[test]
    fn nodes_are_isolated() {
        let mut per_node = BTreeMap::new();
        per_node.insert("b".to_string(), policy("scenario5", [0, 2, 2]));
        let mut c = Collector::new(
            PolicyAssignment { default: policy("scenario1", [0, 0, 0]), per_node },
            CollectorSettings::default(),
            Box::new(Vec::new()),
        );
        c.handle(hello("a", 0), 0).unwrap();
        c.handle(hello("b", 0), 0).unwrap();
        assert!(c.ingest(sample("a", 100, 0, 40.0), 0).unwrap().is_empty());
        let cmds = c.ingest(sample("b", 100, 0, 40.0), 0).unwrap();
        assert_eq!(cmds[0].target_mode, ModeId(2));
        assert_eq!(cmds[0].node_id, "b");
    }

    #[test]
    fn unregistered_telemetry_is_logged_and_rejected() {
        let mut c = Collector::new(
            PolicyAssignment::uniform(policy("s", [0, 0, 0])),
            CollectorSettings::default(),
            Box::new(Vec::new()),
        );
        assert!(matches!(c.ingest(sample("ghost", 1, 0, 50.0), 0), Err(QrmError::Unregistered(_))));
        assert_eq!(c.log_len(), 1);
    }

    #[test]
    fn power_window_averages_recent_samples() {
        let mut c = Collector::new(
            PolicyAssignment::uniform(policy("s", [0, 0, 0])),
            CollectorSettings { energy_window_ms: 200, ..Default::default() },
            Box::new(Vec::new()),
        );
        c.handle(hello("n", 0), 0).unwrap();
        for (t, w) in [(100, 1.0), (200, 2.0), (300, 3.0), (400, 4.0)] {
            let mut s = sample("n", t, 0, 90.0);
            s.device_power_w = w;
            c.ingest(s, 0).unwrap();
        }
        assert_eq!(c.node("n").unwrap().average_power_w(), Some(3.0));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            /// On a monotonically draining trace with prompt acks, one command
            /// is issued per mode change in the policy, never to the current mode.
            #[test]
            fn one_command_per_band_transition(
                modes in proptest::collection::vec(0u8..3, 3),
                step in 0.01f64..2.0,
            ) {
                let p = policy("p", [modes[0], modes[1], modes[2]]);
                let mut c = Collector::new(PolicyAssignment::uniform(p.clone()), CollectorSettings::default(), Box::new(Vec::new()));
                let mut mode = p.initial_mode().unwrap();
                c.handle(hello("n", mode.0), 0).unwrap();
                let (mut pct, mut t, mut issued) = (100.0, 0u64, 0usize);
                while pct > 0.0 {
                    t += 100;
                    for cmd in c.ingest(sample("n", t, mode.0, pct), 0).unwrap() {
                        prop_assert_ne!(cmd.target_mode, mode);
                        issued += 1;
                        mode = cmd.target_mode;
                        c.handle(WireMessage::Ack(Ack { command_id: cmd.command_id, node_id: "n".into() }), 0).unwrap();
                    }
                    pct -= step;
                }
                prop_assert_eq!(issued, p.transition_count());
            }
        }
    }
}
