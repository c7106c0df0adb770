//! Lifestyle and scenario summary rebuilt from a monitoring log.
//!
//! The summary depends only on the ordered log entries (never on wall-clock
//! fields), so replaying the same log always gives the same result.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::domain::{ModeId, ModeTable};
use crate::energy::format_duration;
use crate::metrics::{csv_field, time_weighted_f1, TimedSegment};
use crate::protocol::WireMessage;

use super::log::{Direction, LogSink, MonitoringLogEntry};

pub const EXHAUSTED_REASON: &str = "battery_exhausted";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSpan {
    pub mode: ModeId,
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandRecord {
    pub command_id: u64,
    pub target_mode: ModeId,
    pub issued_at_ms: u64,
    /// Charge reported in the sample that triggered the command.
    pub battery_pct: f64,
    pub acked: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSummary {
    pub node_id: String,
    pub initial_mode: ModeId,
    pub working_time_s: f64,
    pub exhausted: bool,
    pub telemetry_count: u64,
    pub rejected_count: u64,
    /// Seconds attributed to each recognized action label.
    pub label_seconds: BTreeMap<String, f64>,
    pub segments: Vec<ModeSpan>,
    pub realized_f1_pct: Option<f64>,
    pub commands: Vec<CommandRecord>,
    pub mean_device_power_w: Option<f64>,
}

impl NodeSummary {
    pub fn reconfiguration_count(&self) -> usize {
        self.commands.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub nodes: BTreeMap<String, NodeSummary>,
}

#[derive(Debug, Default)]
struct NodeAcc {
    initial_mode: ModeId,
    last_t_ms: u64,
    last_label: String,
    last_battery_pct: f64,
    label_ms: BTreeMap<String, u64>,
    spans: Vec<(ModeId, u64)>,
    commands: Vec<CommandRecord>,
    power_sum: f64,
    telemetry_count: u64,
    rejected_count: u64,
    exhausted: bool,
}

/// Streaming fold over log entries; also usable directly as a [`LogSink`].
#[derive(Debug, Default)]
pub struct Summarizer {
    nodes: BTreeMap<String, NodeAcc>,
}

impl Summarizer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe(&mut self, entry: &MonitoringLogEntry) {
        let node_id = entry.message.node_id();
        if entry.rejected.is_some() {
            if let Some(acc) = self.nodes.get_mut(node_id) {
                acc.rejected_count += 1;
            }
            return;
        }
        match (&entry.message, entry.direction) {
            (WireMessage::Hello(h), Direction::In) => {
                let acc = self.nodes.entry(h.node_id.clone()).or_default();
                if acc.spans.is_empty() {
                    acc.initial_mode = h.initial_mode;
                    acc.spans.push((h.initial_mode, 0));
                    acc.last_battery_pct = 100.0;
                }
            }
            (WireMessage::Telemetry(s), Direction::In) => {
                let Some(acc) = self.nodes.get_mut(&s.node_id) else {
                    return;
                };
                let t = s.timestamp_ms;
                if !acc.last_label.is_empty() {
                    *acc.label_ms.entry(acc.last_label.clone()).or_default() += t.saturating_sub(acc.last_t_ms);
                }
                if acc.spans.last().map(|&(m, _)| m) != Some(s.mode) {
                    acc.spans.push((s.mode, t));
                }
                acc.last_t_ms = acc.last_t_ms.max(t);
                acc.last_label.clone_from(&s.label);
                acc.last_battery_pct = s.battery_pct;
                acc.power_sum += s.device_power_w;
                acc.telemetry_count += 1;
                if s.battery_pct <= 0.0 {
                    acc.exhausted = true;
                }
            }
            (WireMessage::Reconfig(c), Direction::Out) => {
                if let Some(acc) = self.nodes.get_mut(&c.node_id) {
                    acc.commands.push(CommandRecord {
                        command_id: c.command_id,
                        target_mode: c.target_mode,
                        issued_at_ms: c.issued_at_ms,
                        battery_pct: acc.last_battery_pct,
                        acked: false,
                    });
                }
            }
            (WireMessage::Ack(a), Direction::In) => {
                if let Some(acc) = self.nodes.get_mut(&a.node_id) {
                    if let Some(c) = acc.commands.iter_mut().find(|c| c.command_id == a.command_id) {
                        c.acked = true;
                    }
                }
            }
            (WireMessage::Bye(b), Direction::In) => {
                if let Some(acc) = self.nodes.get_mut(&b.node_id) {
                    if b.reason == EXHAUSTED_REASON {
                        acc.exhausted = true;
                    }
                }
            }
            _ => {}
        }
    }

    pub fn finish(self, modes: &ModeTable) -> Summary {
        let nodes = self
            .nodes
            .into_iter()
            .map(|(node_id, acc)| {
                let end_ms = acc.last_t_ms;
                let mut segments: Vec<ModeSpan> = Vec::new();
                for (i, &(mode, start)) in acc.spans.iter().enumerate() {
                    let stop = acc.spans.get(i + 1).map_or(end_ms, |&(_, s)| s);
                    if stop > start {
                        segments.push(ModeSpan {
                            mode,
                            start_s: start as f64 / 1000.0,
                            end_s: stop as f64 / 1000.0,
                        });
                    }
                }
                let timed: Option<Vec<TimedSegment>> = segments
                    .iter()
                    .map(|s| {
                        modes.get(s.mode).map(|p| TimedSegment {
                            duration_s: s.end_s - s.start_s,
                            f1_pct: p.f1_pct,
                        })
                    })
                    .collect();
                let realized_f1_pct = timed.and_then(|t| time_weighted_f1(&t).ok());
                let summary = NodeSummary {
                    node_id: node_id.clone(),
                    initial_mode: acc.initial_mode,
                    working_time_s: end_ms as f64 / 1000.0,
                    exhausted: acc.exhausted,
                    telemetry_count: acc.telemetry_count,
                    rejected_count: acc.rejected_count,
                    label_seconds: acc
                        .label_ms
                        .into_iter()
                        .map(|(l, ms)| (l, ms as f64 / 1000.0))
                        .collect(),
                    segments,
                    realized_f1_pct,
                    commands: acc.commands,
                    mean_device_power_w: (acc.telemetry_count > 0)
                        .then(|| acc.power_sum / acc.telemetry_count as f64),
                };
                (node_id, summary)
            })
            .collect();
        Summary { nodes }
    }
}

impl LogSink for Summarizer {
    fn append(&mut self, entry: &MonitoringLogEntry) -> io::Result<()> {
        self.observe(entry);
        Ok(())
    }
}

pub fn summarize<'a>(entries: impl IntoIterator<Item = &'a MonitoringLogEntry>, modes: &ModeTable) -> Summary {
    let mut s = Summarizer::new();
    for e in entries {
        s.observe(e);
    }
    s.finish(modes)
}

impl Summary {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for n in self.nodes.values() {
            let _ = writeln!(out, "node {}", n.node_id);
            let _ = writeln!(
                out,
                "  working time   {} ({:.3} s){}",
                format_duration(n.working_time_s),
                n.working_time_s,
                if n.exhausted { ", battery exhausted" } else { "" }
            );
            match n.realized_f1_pct {
                Some(f1) => {
                    let _ = writeln!(out, "  realized F1    {f1:.2}");
                }
                None => {
                    let _ = writeln!(out, "  realized F1    n/a");
                }
            }
            if let Some(p) = n.mean_device_power_w {
                let _ = writeln!(out, "  mean power     {p:.3} W");
            }
            let _ = writeln!(out, "  reconfigurations {}", n.commands.len());
            for c in &n.commands {
                let _ = writeln!(
                    out,
                    "    #{} -> mode {} at {} ({:.3} s, battery {:.4}%){}",
                    c.command_id,
                    c.target_mode,
                    format_duration(c.issued_at_ms as f64 / 1000.0),
                    c.issued_at_ms as f64 / 1000.0,
                    c.battery_pct,
                    if c.acked { "" } else { " unacknowledged" }
                );
            }
            let _ = writeln!(out, "  mode timeline");
            for s in &n.segments {
                let _ = writeln!(out, "    mode {} {:>12.3} s .. {:>12.3} s", s.mode, s.start_s, s.end_s);
            }
            if !n.label_seconds.is_empty() {
                let _ = writeln!(out, "  activity");
                for (label, secs) in &n.label_seconds {
                    let _ = writeln!(out, "    {label:<28} {secs:>12.1} s");
                }
            }
        }
        out
    }

    /// `node,label,total_seconds`
    pub fn write_histogram_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "node,label,total_seconds")?;
        for n in self.nodes.values() {
            for (label, secs) in &n.label_seconds {
                writeln!(out, "{},{},{:.3}", csv_field(&n.node_id), csv_field(label), secs)?;
            }
        }
        Ok(())
    }

    /// `node,segment,mode,start_s,end_s`
    pub fn write_timeline_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "node,segment,mode,start_s,end_s")?;
        for n in self.nodes.values() {
            for (i, s) in n.segments.iter().enumerate() {
                writeln!(out, "{},{},{},{:.3},{:.3}", csv_field(&n.node_id), i, s.mode, s.start_s, s.end_s)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{ModeProfile, ReconfigCommand, TelemetrySample};
    use crate::protocol::{Ack, Bye, Hello};

    fn modes() -> ModeTable {
        let mk = |id: u8, f1: f64| ModeProfile {
            mode_id: ModeId(id),
            model_name: format!("m{id}"),
            model_size_mb: 1.0,
            gpu_power_w: 1.0,
            device_power_w: 4.0,
            throughput_fps: 30.0,
            accuracy_pct: 80.0,
            f1_pct: f1,
        };
        ModeTable::new(vec![mk(0, 80.0), mk(1, 60.0)]).unwrap()
    }

    fn entry(seq: u64, direction: Direction, message: WireMessage) -> MonitoringLogEntry {
        MonitoringLogEntry {
            seq,
            recv_wall_ms: 0,
            virtual_ms: 0,
            direction,
            message,
            rejected: None,
        }
    }

    fn tel(t: u64, mode: u8, pct: f64, label: &str) -> WireMessage {
        WireMessage::Telemetry(TelemetrySample {
            node_id: "n".into(),
            timestamp_ms: t,
            mode: ModeId(mode),
            gpu_power_w: 1.0,
            device_power_w: 4.0,
            temperature_c: 40.0,
            fps: 30.0,
            battery_pct: pct,
            label: label.into(),
            confidence: 0.9,
        })
    }

    fn hello() -> WireMessage {
        WireMessage::Hello(Hello {
            node_id: "n".into(),
            capacity_wh: 1.0,
            initial_mode: ModeId(0),
            class_labels: vec!["walking".into(), "sitting".into()],
        })
    }

    #[test]
    fn hello_and_bye_only() {
        let log = vec![
            entry(0, Direction::In, hello()),
            entry(1, Direction::In, WireMessage::Bye(Bye { node_id: "n".into(), reason: "shutdown".into() })),
        ];
        let s = summarize(&log, &modes());
        let n = &s.nodes["n"];
        assert!(n.label_seconds.is_empty());
        assert_eq!(n.working_time_s, 0.0);
        assert!(n.segments.is_empty());
        assert_eq!(n.realized_f1_pct, None);
    }

    #[test]
    fn timeline_histogram_and_f1() {
        let log = vec![
            entry(0, Direction::In, hello()),
            entry(1, Direction::In, tel(1000, 0, 80.0, "")),
            entry(2, Direction::In, tel(2000, 0, 60.0, "walking")),
            entry(3, Direction::In, tel(3000, 0, 49.0, "walking")),
            entry(
                4,
                Direction::Out,
                WireMessage::Reconfig(ReconfigCommand {
                    command_id: 1,
                    node_id: "n".into(),
                    target_mode: ModeId(1),
                    issued_at_ms: 3000,
                }),
            ),
            entry(5, Direction::In, WireMessage::Ack(Ack { command_id: 1, node_id: "n".into() })),
            entry(6, Direction::In, tel(3000, 1, 49.0, "sitting")),
            entry(7, Direction::In, tel(4000, 1, 0.0, "sitting")),
            entry(8, Direction::In, WireMessage::Bye(Bye { node_id: "n".into(), reason: EXHAUSTED_REASON.into() })),
        ];
        let s = summarize(&log, &modes());
        let n = &s.nodes["n"];
        assert_eq!(n.working_time_s, 4.0);
        assert!(n.exhausted);
        assert_eq!(n.segments.len(), 2);
        assert_eq!((n.segments[0].end_s, n.segments[1].start_s), (3.0, 3.0));
        // 3 s at 80, 1 s at 60
        assert!((n.realized_f1_pct.unwrap() - 75.0).abs() < 1e-12);
        assert_eq!(n.commands.len(), 1);
        assert!(n.commands[0].acked);
        assert_eq!(n.commands[0].battery_pct, 49.0);
        assert_eq!(n.label_seconds["walking"], 1.0);
        assert_eq!(n.label_seconds["sitting"], 1.0);

        let mut csv = Vec::new();
        s.write_timeline_csv(&mut csv).unwrap();
        assert_eq!(
            String::from_utf8(csv).unwrap(),
            "node,segment,mode,start_s,end_s\nn,0,0,0.000,3.000\nn,1,1,3.000,4.000\n"
        );
        let mut csv = Vec::new();
        s.write_histogram_csv(&mut csv).unwrap();
        assert_eq!(
            String::from_utf8(csv).unwrap(),
            "node,label,total_seconds\nn,sitting,1.000\nn,walking,1.000\n"
        );
        assert!(s.render_text().contains("reconfigurations 1"));
        // replay is deterministic
        assert_eq!(summarize(&log, &modes()), s);
    }
}
