//! Structured event trace, one JSON object per line.
//!
//! `seq` comes from a single fetch-add counter shared by every worker of a
//! pass, so if one event happens-before another its `seq` is smaller.

use std::fmt;
use std::io::{self, Write};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::task::{TaskDescriptor, TaskId, TaskKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Worker {
    Launch,
    Scheduler,
    Subscriber,
    Processor(usize),
}

impl fmt::Display for Worker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Worker::Launch => f.write_str("launch"),
            Worker::Scheduler => f.write_str("scheduler"),
            Worker::Subscriber => f.write_str("subscriber"),
            Worker::Processor(i) => write!(f, "processor:{i}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Launch,
    WorkerStart,
    Gate,
    DispatchPut,
    DispatchSignal,
    CombinePut,
    CombineSignal,
    Enqueue,
    Assign,
    TaskStart,
    TaskEnd,
    /// Scheduler state after an assignment pass.
    Sweep,
    Barrier,
    Interrupt,
    WorkerExit,
}

/// `(source device, local expert, row block, column block)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileCoord {
    pub source: usize,
    pub expert: usize,
    pub row_block: usize,
    pub col_block: usize,
}

impl From<&TaskDescriptor> for TileCoord {
    fn from(t: &TaskDescriptor) -> Self {
        TileCoord {
            source: t.source,
            expert: t.expert,
            row_block: t.row_block,
            col_block: t.col_block,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    pub time_ns: u64,
    pub device: usize,
    pub worker: Worker,
    pub event: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskId>,
    #[serde(default, rename = "type", skip_serializing_if = "Option::is_none")]
    pub kind: Option<TaskKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tile: Option<TileCoord>,
    /// Peer device of a put or signal, or the processor of an assignment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peer: Option<usize>,
    /// Row count of a put or signal.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<usize>,
    /// Sweep: idle processors and assignable pending tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idle: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assignable: Option<usize>,
}

impl TraceEvent {
    /// Same event with timing fields cleared, for run-to-run comparisons.
    pub fn untimed(&self) -> TraceEvent {
        TraceEvent {
            seq: 0,
            time_ns: 0,
            ..self.clone()
        }
    }
}

/// Pass-wide clock; every emitted event advances it.
pub struct PassClock {
    start: Instant,
    seq: AtomicU64,
}

impl Default for PassClock {
    fn default() -> Self {
        PassClock {
            start: Instant::now(),
            seq: AtomicU64::new(0),
        }
    }
}

impl PassClock {
    pub fn new() -> Self {
        Self::default()
    }

    /// Events emitted so far; doubles as the global progress counter.
    pub fn progress(&self) -> u64 {
        self.seq.load(Ordering::Acquire)
    }

    fn tick(&self) -> (u64, u64) {
        let seq = self.seq.fetch_add(1, Ordering::AcqRel);
        (seq, self.start.elapsed().as_nanos() as u64)
    }
}

/// Per-worker event buffer.
pub struct Tracer<'a> {
    clock: &'a PassClock,
    device: usize,
    worker: Worker,
    events: Vec<TraceEvent>,
}

impl<'a> Tracer<'a> {
    pub fn new(clock: &'a PassClock, device: usize, worker: Worker) -> Self {
        Tracer {
            clock,
            device,
            worker,
            events: Vec::new(),
        }
    }

    pub fn device(&self) -> usize {
        self.device
    }

    pub fn progress(&self) -> u64 {
        self.clock.progress()
    }

    pub fn emit(&mut self, event: EventKind) -> &mut TraceEvent {
        let (seq, time_ns) = self.clock.tick();
        self.events.push(TraceEvent {
            seq,
            time_ns,
            device: self.device,
            worker: self.worker,
            event,
            task: None,
            kind: None,
            tile: None,
            peer: None,
            rows: None,
            idle: None,
            assignable: None,
        });
        self.events.last_mut().expect("just pushed")
    }

    pub fn task(&mut self, event: EventKind, id: TaskId, task: &TaskDescriptor) -> &mut TraceEvent {
        let e = self.emit(event);
        e.task = Some(id);
        e.kind = Some(task.kind);
        e.tile = Some(task.into());
        e
    }

    pub fn into_events(self) -> Vec<TraceEvent> {
        self.events
    }
}

pub fn write_jsonl<W: Write>(events: &[TraceEvent], mut out: W) -> io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(text: &str) -> serde_json::Result<Vec<TraceEvent>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip_keeps_fields() {
        let clock = PassClock::new();
        let mut t = Tracer::new(&clock, 2, Worker::Processor(1));
        let task = TaskDescriptor::gemm1(0, 1, 3, 2, 5);
        t.task(EventKind::TaskStart, 7, &task);
        t.emit(EventKind::Sweep).idle = Some(0);
        let events = t.into_events();
        let mut buf = Vec::new();
        write_jsonl(&events, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().next().unwrap().contains("\"type\":\"Gemm1\""));
        assert_eq!(read_jsonl(&text).unwrap(), events);
        assert_eq!(events[0].seq + 1, events[1].seq);
    }
}
