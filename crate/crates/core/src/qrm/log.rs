//! Append-only monitoring log: every message in and out of the collector,
//! one NDJSON entry per line with a gapless sequence number.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::protocol::WireMessage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    In,
    Out,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitoringLogEntry {
    pub seq: u64,
    /// Collector wall clock at receipt; the only nondeterministic field.
    pub recv_wall_ms: u64,
    /// Sender's virtual clock, as last reported by that node.
    pub virtual_ms: u64,
    pub direction: Direction,
    pub message: WireMessage,
    /// Why the collector refused an inbound message, if it did.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejected: Option<String>,
}

pub trait LogSink: Send {
    fn append(&mut self, entry: &MonitoringLogEntry) -> io::Result<()>;

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl LogSink for Vec<MonitoringLogEntry> {
    fn append(&mut self, entry: &MonitoringLogEntry) -> io::Result<()> {
        self.push(entry.clone());
        Ok(())
    }
}

/// Discards entries; for runs that only need the collector's decisions.
#[derive(Debug, Default)]
pub struct NullSink;

impl LogSink for NullSink {
    fn append(&mut self, _: &MonitoringLogEntry) -> io::Result<()> {
        Ok(())
    }
}

/// Writes each entry as one JSON line.
pub struct NdjsonSink<W: Write + Send> {
    out: W,
}

impl<W: Write + Send> NdjsonSink<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl NdjsonSink<BufWriter<File>> {
    /// Open `path` for appending, creating it if needed.
    pub fn append_to(path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self::new(BufWriter::new(file)))
    }
}

impl<W: Write + Send> LogSink for NdjsonSink<W> {
    fn append(&mut self, entry: &MonitoringLogEntry) -> io::Result<()> {
        serde_json::to_writer(&mut self.out, entry)?;
        self.out.write_all(b"\n")
    }

    fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }
}

/// Fans every entry out to two sinks.
pub struct Tee<A, B>(pub A, pub B);

impl<A: LogSink, B: LogSink> LogSink for Tee<A, B> {
    fn append(&mut self, entry: &MonitoringLogEntry) -> io::Result<()> {
        self.0.append(entry)?;
        self.1.append(entry)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.0.flush()?;
        self.1.flush()
    }
}

impl<S: LogSink + ?Sized> LogSink for Box<S> {
    fn append(&mut self, entry: &MonitoringLogEntry) -> io::Result<()> {
        (**self).append(entry)
    }

    fn flush(&mut self) -> io::Result<()> {
        (**self).flush()
    }
}

/// Sequence-numbering front end over a sink.
pub struct MonitoringLog {
    next_seq: u64,
    sink: Box<dyn LogSink>,
}

impl MonitoringLog {
    pub fn new(sink: Box<dyn LogSink>) -> Self {
        Self { next_seq: 0, sink }
    }

    pub fn append(
        &mut self,
        recv_wall_ms: u64,
        virtual_ms: u64,
        direction: Direction,
        message: WireMessage,
        rejected: Option<String>,
    ) -> io::Result<u64> {
        let seq = self.next_seq;
        self.sink.append(&MonitoringLogEntry {
            seq,
            recv_wall_ms,
            virtual_ms,
            direction,
            message,
            rejected,
        })?;
        self.next_seq += 1;
        Ok(seq)
    }

    pub fn len(&self) -> u64 {
        self.next_seq
    }

    pub fn is_empty(&self) -> bool {
        self.next_seq == 0
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.sink.flush()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LogReadError {
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: sequence number {found}, expected {expected}")]
    Sequence { line: usize, expected: u64, found: u64 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Read a log, checking that sequence numbers start at 0 and have no gaps.
pub fn read_log<R: BufRead>(reader: R) -> Result<Vec<MonitoringLogEntry>, LogReadError> {
    let mut entries = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: MonitoringLogEntry =
            serde_json::from_str(&line).map_err(|source| LogReadError::Parse { line: i + 1, source })?;
        let expected = entries.len() as u64;
        if entry.seq != expected {
            return Err(LogReadError::Sequence {
                line: i + 1,
                expected,
                found: entry.seq,
            });
        }
        entries.push(entry);
    }
    Ok(entries)
}

pub fn read_log_file(path: &Path) -> Result<Vec<MonitoringLogEntry>, LogReadError> {
    read_log(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::Bye;

    fn bye(id: &str) -> WireMessage {
        WireMessage::Bye(Bye {
            node_id: id.into(),
            reason: "done".into(),
        })
    }

    #[test]
    fn ndjson_roundtrip_with_gapless_sequence() {
        let mut log = MonitoringLog::new(Box::new(NdjsonSink::new(Vec::new())));
        for i in 0..3 {
            assert_eq!(log.append(5, i, Direction::In, bye("n1"), None).unwrap(), i);
        }
        let mut buf = Vec::new();
        let mut sink = NdjsonSink::new(&mut buf);
        for i in 0..3 {
            sink.append(&MonitoringLogEntry {
                seq: i,
                recv_wall_ms: 0,
                virtual_ms: 10 * i,
                direction: Direction::Out,
                message: bye("n2"),
                rejected: (i == 1).then(|| "nope".to_string()),
            })
            .unwrap();
        }
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().nth(1).unwrap().ends_with(",\"rejected\":\"nope\"}"));
        let back = read_log(text.as_bytes()).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[2].virtual_ms, 20);
    }

    #[test]
    fn sequence_gap_is_detected() {
        let line = |seq: u64| {
            serde_json::to_string(&MonitoringLogEntry {
                seq,
                recv_wall_ms: 0,
                virtual_ms: 0,
                direction: Direction::In,
                message: bye("n"),
                rejected: None,
            })
            .unwrap()
        };
        let text = format!("{}\n{}\n", line(0), line(2));
        assert!(matches!(
            read_log(text.as_bytes()),
            Err(LogReadError::Sequence { expected: 1, found: 2, .. })
        ));
    }
}
