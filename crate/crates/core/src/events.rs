//! Structured event log (JSON lines) and scheduling metrics counters.
//!
//! Events are buffered in memory and dumped by the harness; counters are
//! cheap enough to stay on in every run and back the scheduling metrics
//! (preemption counts, queue lengths) without parsing the log.

use std::collections::HashMap;
use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::Serialize;

use crate::registry::CollectiveId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Fetch,
    Preempt,
    Resume,
    Complete,
    Quit,
    Start,
}

#[derive(Debug, Clone, Serialize)]
pub struct Event {
    pub event: EventKind,
    pub rank: u32,
    pub lane: u32,
    pub collective_id: Option<CollectiveId>,
    #[serde(rename = "loop")]
    pub loop_id: Option<usize>,
    pub step: Option<usize>,
    pub slice: Option<usize>,
    pub spins: Option<u64>,
    pub queue_len: usize,
    pub timestamp: f64,
}

pub struct EventLog {
    enabled: bool,
    start: Instant,
    events: Mutex<Vec<Event>>,
}

impl EventLog {
    pub fn new(enabled: bool) -> Self {
        EventLog {
            enabled,
            start: Instant::now(),
            events: Mutex::new(Vec::new()),
        }
    }

    pub fn record(&self, mut ev: Event) {
        if !self.enabled {
            return;
        }
        ev.timestamp = self.start.elapsed().as_secs_f64();
        self.events.lock().unwrap().push(ev);
    }

    pub fn snapshot(&self) -> Vec<Event> {
        self.events.lock().unwrap().clone()
    }

    /// One JSON object per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for ev in self.events.lock().unwrap().iter() {
            serde_json::to_writer(&mut w, ev)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.events
            .lock()
            .unwrap()
            .iter()
            .filter(|e| e.event == kind)
            .count()
    }
}

pub fn event(kind: EventKind, rank: u32, lane: u32, queue_len: usize) -> Event {
    Event {
        event: kind,
        rank,
        lane,
        collective_id: None,
        loop_id: None,
        step: None,
        slice: None,
        spins: None,
        queue_len,
        timestamp: 0.0,
    }
}

/// Per-rank scheduling counters, shared by all lanes of the rank.
#[derive(Default)]
pub struct Stats {
    /// Preemptions per collective, summed over lanes.
    pub preemptions: Mutex<HashMap<CollectiveId, u64>>,
    pub preemptions_total: AtomicU64,
    /// Task-queue length observed at each SQ fetch, in fetch order.
    pub queue_len_at_fetch: Mutex<Vec<usize>>,
    pub max_queue_len: AtomicU64,
    pub quits: AtomicU64,
    pub starts: AtomicU64,
    /// Scheduler traversal rounds across all daemon incarnations.
    pub rounds: AtomicU64,
    /// Time composition, nanoseconds: SQ reading, primitive execution,
    /// CQE writing; the remainder of wall time is scheduling overhead.
    pub read_sqe_ns: AtomicU64,
    pub execute_ns: AtomicU64,
    pub write_cqe_ns: AtomicU64,
}

impl Stats {
    pub fn note_preempt(&self, id: CollectiveId) {
        *self.preemptions.lock().unwrap().entry(id).or_default() += 1;
        self.preemptions_total.fetch_add(1, Ordering::Relaxed);
    }

    pub fn note_fetch_queue_len(&self, len: usize) {
        self.queue_len_at_fetch.lock().unwrap().push(len);
        self.max_queue_len.fetch_max(len as u64, Ordering::Relaxed);
    }

    pub fn preemptions_of(&self, id: CollectiveId) -> u64 {
        self.preemptions
            .lock()
            .unwrap()
            .get(&id)
            .copied()
            .unwrap_or(0)
    }
}
