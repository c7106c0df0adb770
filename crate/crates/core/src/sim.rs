//! Virtual-time simulation of a node fleet against an in-process collector.
//!
//! Every message still crosses the wire codec (encode, then decode on the
//! other side), but delivery is instantaneous and ordered by virtual time,
//! so a run is fully determined by its configuration and seeds.

use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use thiserror::Error;

use crate::domain::{ModeTable, PredictionRecord};
use crate::nodesim::{ModeSegment, NodeConfig, NodeError, NodeEvent, NodeSim, SimTime};
use crate::protocol::{self, Ack, Bye, Hello, ProtocolError, WireMessage};
use crate::qrm::summary::EXHAUSTED_REASON;
use crate::qrm::{Collector, CollectorSettings, LogSink, MonitoringLogEntry, PolicyAssignment, QrmError, Summarizer, Summary};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Qrm(#[from] QrmError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("collector sent `{0}` to a node")]
    UnexpectedReply(&'static str),
}

pub fn wall_clock_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

/// Sink wrapper that lets the caller keep a handle on the inner sink.
pub struct SharedSink<S>(pub Arc<Mutex<S>>);

impl<S: LogSink> LogSink for SharedSink<S> {
    fn append(&mut self, entry: &MonitoringLogEntry) -> std::io::Result<()> {
        self.0.lock().expect("sink lock").append(entry)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.0.lock().expect("sink lock").flush()
    }
}

/// Expand a single-label prediction into a confidence vector whose argmax is
/// the predicted class: the remaining mass is spread over the other classes,
/// capped at half the winning confidence.
pub fn prediction_record(true_class: usize, predicted: usize, confidence: f64, num_classes: usize) -> PredictionRecord {
    let rest = if num_classes > 1 {
        ((1.0 - confidence) / (num_classes - 1) as f64).min(confidence / 2.0)
    } else {
        0.0
    };
    let confidences = (0..num_classes)
        .map(|c| if c == predicted { confidence } else { rest })
        .collect();
    PredictionRecord {
        true_class,
        confidences,
    }
}

#[derive(Debug, Clone)]
pub struct NodeOutcome {
    pub node_id: String,
    pub exhausted_at: Option<SimTime>,
    pub commands_applied: usize,
    pub segments: Vec<ModeSegment>,
}

#[derive(Debug, Clone)]
pub struct SimulationOutcome {
    pub nodes: Vec<NodeOutcome>,
    pub summary: Summary,
    pub predictions: Vec<PredictionRecord>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub record_predictions: bool,
    /// Stop every node at this virtual time even if its battery lasts longer.
    pub horizon: Option<SimTime>,
}

struct Fleet<'a> {
    collector: &'a mut Collector,
    sims: Vec<NodeSim>,
    applied: Vec<usize>,
    predictions: Vec<PredictionRecord>,
    record_predictions: bool,
}

impl Fleet<'_> {
    fn send_to_collector(&mut self, i: usize, msg: WireMessage) -> Result<(), SimError> {
        let frame = protocol::encode(&msg)?;
        let replies = self.collector.handle_frame(&frame, wall_clock_ms())?;
        for reply in replies {
            self.deliver_to_node(i, reply)?;
        }
        Ok(())
    }

    fn deliver_to_node(&mut self, i: usize, msg: WireMessage) -> Result<(), SimError> {
        let frame = protocol::encode(&msg)?;
        match protocol::decode(&frame)? {
            WireMessage::Reconfig(cmd) => {
                let switched = self.sims[i].apply_reconfig(&cmd)?;
                self.applied[i] += 1;
                self.send_to_collector(
                    i,
                    WireMessage::Ack(Ack {
                        command_id: cmd.command_id,
                        node_id: cmd.node_id,
                    }),
                )?;
                if switched.is_some() {
                    let snapshot = self.sims[i].telemetry_sample();
                    self.send_to_collector(i, WireMessage::Telemetry(snapshot))?;
                }
                Ok(())
            }
            other => Err(SimError::UnexpectedReply(other.type_name())),
        }
    }

    fn handle(&mut self, i: usize, event: NodeEvent) -> Result<(), SimError> {
        match event {
            NodeEvent::BatchCompleted {
                true_class,
                predicted_class,
                confidence,
                ..
            } => {
                if self.record_predictions {
                    let k = self.sims[i].config().class_labels.len();
                    self.predictions
                        .push(prediction_record(true_class, predicted_class, confidence, k));
                }
                Ok(())
            }
            NodeEvent::TelemetryDue { sample, .. } => self.send_to_collector(i, WireMessage::Telemetry(sample)),
            NodeEvent::ModeSwitched { .. } => {
                let snapshot = self.sims[i].telemetry_sample();
                self.send_to_collector(i, WireMessage::Telemetry(snapshot))
            }
            NodeEvent::BatteryExhausted { .. } => {
                let last = self.sims[i].telemetry_sample();
                self.send_to_collector(i, WireMessage::Telemetry(last))?;
                let node_id = self.sims[i].node_id().to_string();
                self.send_to_collector(
                    i,
                    WireMessage::Bye(Bye {
                        node_id,
                        reason: EXHAUSTED_REASON.into(),
                    }),
                )
            }
        }
    }
}

pub fn hello_for(config: &NodeConfig) -> WireMessage {
    WireMessage::Hello(Hello {
        node_id: config.node_id.clone(),
        capacity_wh: config.battery.capacity_wh(),
        initial_mode: config.initial_mode,
        class_labels: config.class_labels.clone(),
    })
}

/// Run nodes against `collector` until every battery is exhausted (or the
/// horizon is reached). Nodes are interleaved in virtual-time order; ties go
/// to the node listed first.
pub fn run_with_collector(
    collector: &mut Collector,
    nodes: Vec<NodeConfig>,
    modes: &ModeTable,
    options: RunOptions,
) -> Result<(Vec<NodeOutcome>, Vec<PredictionRecord>), SimError> {
    let sims = nodes
        .into_iter()
        .map(|c| NodeSim::new(c, modes.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let n = sims.len();
    let mut fleet = Fleet {
        collector,
        sims,
        applied: vec![0; n],
        predictions: Vec::new(),
        record_predictions: options.record_predictions,
    };
    for i in 0..n {
        let hello = hello_for(fleet.sims[i].config());
        fleet.send_to_collector(i, hello)?;
    }
    let horizon = options.horizon.unwrap_or(SimTime(u64::MAX));
    loop {
        let next = (0..n)
            .filter(|&i| !fleet.sims[i].is_exhausted() && fleet.sims[i].now() < horizon)
            .min_by_key(|&i| (fleet.sims[i].next_event_time().min(horizon), i));
        let Some(i) = next else { break };
        let until = fleet.sims[i].next_event_time().min(horizon);
        for event in fleet.sims[i].step(until) {
            fleet.handle(i, event)?;
        }
    }
    for i in 0..n {
        if !fleet.sims[i].is_exhausted() {
            let node_id = fleet.sims[i].node_id().to_string();
            fleet.send_to_collector(
                i,
                WireMessage::Bye(Bye {
                    node_id,
                    reason: "horizon".into(),
                }),
            )?;
        }
    }
    fleet.collector.flush()?;
    let outcomes = fleet
        .sims
        .iter()
        .zip(&fleet.applied)
        .map(|(s, &applied)| NodeOutcome {
            node_id: s.node_id().to_string(),
            exhausted_at: s.is_exhausted().then(|| s.now()),
            commands_applied: applied,
            segments: s.segments().to_vec(),
        })
        .collect();
    Ok((outcomes, fleet.predictions))
}

/// Build a collector over `sink`, run the fleet, and summarize the log.
pub fn run_virtual(
    nodes: Vec<NodeConfig>,
    policies: PolicyAssignment,
    settings: CollectorSettings,
    modes: &ModeTable,
    sink: Box<dyn LogSink>,
    options: RunOptions,
) -> Result<SimulationOutcome, SimError> {
    let summarizer = Arc::new(Mutex::new(Summarizer::new()));
    let tee = crate::qrm::log::Tee(sink, SharedSink(Arc::clone(&summarizer)));
    let mut collector = Collector::new(policies, settings, Box::new(tee));
    let (outcomes, predictions) = run_with_collector(&mut collector, nodes, modes, options)?;
    drop(collector);
    let summarizer = Arc::try_unwrap(summarizer)
        .map_err(|_| ())
        .expect("collector dropped")
        .into_inner()
        .expect("sink lock");
    Ok(SimulationOutcome {
        nodes: outcomes,
        summary: summarizer.finish(modes),
        predictions,
    })
}
