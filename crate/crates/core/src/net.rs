//! Wall-clock deployment over TCP: a collector server plus node clients.
//!
//! Each node runs on its own thread and maps elapsed wall time, multiplied
//! by a speed-up factor, onto its virtual clock. Frames are newline-delimited
//! JSON, one message per write.

use std::io::{self, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crate::domain::{ModeTable, ReconfigCommand};
use crate::nodesim::{NodeConfig, NodeEvent, NodeSim, SimTime};
use crate::protocol::{self, Ack, Bye, FrameReader, WireMessage};
use crate::qrm::summary::EXHAUSTED_REASON;
use crate::qrm::Collector;
use crate::sim::{hello_for, wall_clock_ms, NodeOutcome, SimError};

/// Collector listening on a TCP socket; one thread per connection.
pub struct CollectorServer {
    addr: SocketAddr,
    collector: Arc<Mutex<Collector>>,
    stop: Arc<AtomicBool>,
    rejected_frames: Arc<AtomicU64>,
    acceptor: JoinHandle<Vec<JoinHandle<()>>>,
}

impl CollectorServer {
    /// Bind `addr` and start accepting nodes. Fails if the port is taken.
    pub fn start(addr: SocketAddr, collector: Collector) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let collector = Arc::new(Mutex::new(collector));
        let stop = Arc::new(AtomicBool::new(false));
        let rejected_frames = Arc::new(AtomicU64::new(0));
        let acceptor = {
            let collector = Arc::clone(&collector);
            let stop = Arc::clone(&stop);
            let rejected = Arc::clone(&rejected_frames);
            thread::spawn(move || {
                let mut workers = Vec::new();
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let collector = Arc::clone(&collector);
                    let rejected = Arc::clone(&rejected);
                    workers.push(thread::spawn(move || serve(stream, &collector, &rejected)));
                }
                workers
            })
        };
        Ok(Self {
            addr,
            collector,
            stop,
            rejected_frames,
            acceptor,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Frames that failed to decode or were refused by the collector.
    pub fn rejected_frames(&self) -> u64 {
        self.rejected_frames.load(Ordering::SeqCst)
    }

    /// Stop accepting, wait for open connections to close, and hand back
    /// the collector.
    pub fn shutdown(self) -> Collector {
        self.stop.store(true, Ordering::SeqCst);
        // wake the blocking accept
        let _ = TcpStream::connect(self.addr);
        let workers = self.acceptor.join().unwrap_or_default();
        for w in workers {
            let _ = w.join();
        }
        let mutex = Arc::try_unwrap(self.collector)
            .map_err(|_| ())
            .expect("all connection threads joined");
        let mut collector = mutex.into_inner().unwrap_or_else(|p| p.into_inner());
        let _ = collector.flush();
        collector
    }
}

fn serve(stream: TcpStream, collector: &Mutex<Collector>, rejected: &AtomicU64) {
    let Ok(read_half) = stream.try_clone() else { return };
    let mut reader = FrameReader::new(read_half);
    let mut writer = stream;
    while let Ok(Some(item)) = reader.next_message() {
        let replies = match item {
            Ok(msg) => collector
                .lock()
                .unwrap_or_else(|p| p.into_inner())
                .handle(msg, wall_clock_ms()),
            Err(e) => Err(e.into()),
        };
        match replies {
            Ok(replies) => {
                for reply in replies {
                    let sent = protocol::encode(&reply)
                        .map_err(io::Error::other)
                        .and_then(|frame| writer.write_all(&frame));
                    if sent.is_err() {
                        return;
                    }
                }
            }
            Err(_) => {
                rejected.fetch_add(1, Ordering::SeqCst);
            }
        }
    }
    let _ = writer.shutdown(Shutdown::Both);
}

#[derive(Debug, Clone, Copy)]
pub struct RealtimeOptions {
    /// Virtual seconds per wall-clock second.
    pub speedup: f64,
    /// Upper bound on the sleep between node steps.
    pub max_tick: Duration,
}

impl Default for RealtimeOptions {
    fn default() -> Self {
        Self {
            speedup: 1.0,
            max_tick: Duration::from_millis(20),
        }
    }
}

struct TcpNode {
    sim: NodeSim,
    writer: TcpStream,
    commands: Receiver<ReconfigCommand>,
    applied: usize,
}

impl TcpNode {
    fn send(&mut self, msg: &WireMessage) -> Result<(), SimError> {
        let frame = protocol::encode(msg)?;
        self.writer.write_all(&frame)?;
        Ok(())
    }

    fn send_snapshot(&mut self) -> Result<(), SimError> {
        let sample = self.sim.telemetry_sample();
        self.send(&WireMessage::Telemetry(sample))
    }

    fn handle(&mut self, event: NodeEvent) -> Result<(), SimError> {
        match event {
            NodeEvent::BatchCompleted { .. } => Ok(()),
            NodeEvent::TelemetryDue { sample, .. } => self.send(&WireMessage::Telemetry(sample)),
            NodeEvent::ModeSwitched { .. } => self.send_snapshot(),
            NodeEvent::BatteryExhausted { .. } => {
                self.send_snapshot()?;
                let node_id = self.sim.node_id().to_string();
                self.send(&WireMessage::Bye(Bye {
                    node_id,
                    reason: EXHAUSTED_REASON.into(),
                }))
            }
        }
    }

    fn drain_commands(&mut self) -> Result<(), SimError> {
        while let Ok(cmd) = self.commands.try_recv() {
            let switched = self.sim.apply_reconfig(&cmd)?;
            self.applied += 1;
            self.send(&WireMessage::Ack(Ack {
                command_id: cmd.command_id,
                node_id: cmd.node_id,
            }))?;
            if switched.is_some() {
                self.send_snapshot()?;
            }
        }
        Ok(())
    }
}

/// Run one node against a collector at `addr` until its battery is empty.
pub fn run_tcp_node(
    config: NodeConfig,
    modes: ModeTable,
    addr: SocketAddr,
    options: RealtimeOptions,
) -> Result<NodeOutcome, SimError> {
    let hello = hello_for(&config);
    let sim = NodeSim::new(config, modes)?;
    let stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    let (tx, rx) = mpsc::channel();
    let reader_stream = stream.try_clone()?;
    let reader = thread::spawn(move || {
        let mut reader = FrameReader::new(reader_stream);
        while let Ok(Some(item)) = reader.next_message() {
            if let Ok(WireMessage::Reconfig(cmd)) = item {
                if tx.send(cmd).is_err() {
                    break;
                }
            }
        }
    });
    let mut node = TcpNode {
        sim,
        writer: stream,
        commands: rx,
        applied: 0,
    };
    node.send(&hello)?;
    let tick = node
        .sim
        .config()
        .batch_period()
        .as_secs_f64()
        .min(node.sim.config().telemetry_period_ms as f64 / 1000.0)
        / options.speedup;
    let tick = Duration::from_secs_f64(tick).clamp(Duration::from_micros(200), options.max_tick);
    let start = Instant::now();
    while !node.sim.is_exhausted() {
        node.drain_commands()?;
        let target = SimTime::from_secs_f64(start.elapsed().as_secs_f64() * options.speedup);
        // step one event at a time so commands land close to their trigger
        while !node.sim.is_exhausted() && node.sim.next_event_time() <= target {
            let next = node.sim.next_event_time();
            for event in node.sim.step(next) {
                node.handle(event)?;
            }
            node.drain_commands()?;
        }
        thread::sleep(tick);
    }
    node.writer.shutdown(Shutdown::Write)?;
    let _ = reader.join();
    Ok(NodeOutcome {
        node_id: node.sim.node_id().to_string(),
        exhausted_at: Some(node.sim.now()),
        commands_applied: node.applied,
        segments: node.sim.segments().to_vec(),
    })
}

/// Start a collector on `addr`, run every node on its own thread, and shut
/// the collector down once all nodes have finished.
pub fn run_realtime(
    collector: Collector,
    addr: SocketAddr,
    nodes: Vec<NodeConfig>,
    modes: &ModeTable,
    options: RealtimeOptions,
) -> Result<(Collector, Vec<NodeOutcome>), SimError> {
    let server = CollectorServer::start(addr, collector)?;
    let target = server.local_addr();
    let handles: Vec<_> = nodes
        .into_iter()
        .map(|cfg| {
            let modes = modes.clone();
            thread::spawn(move || run_tcp_node(cfg, modes, target, options))
        })
        .collect();
    let mut outcomes = Vec::with_capacity(handles.len());
    let mut first_err = None;
    for h in handles {
        match h.join().expect("node thread panicked") {
            Ok(o) => outcomes.push(o),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    let collector = server.shutdown();
    match first_err {
        Some(e) => Err(e),
        None => Ok((collector, outcomes)),
    }
}
