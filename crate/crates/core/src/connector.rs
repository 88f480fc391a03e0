//! Send/recv connectors: bounded single-writer single-reader slice rings.
//!
//! The writer's send connector of an edge is the reader's recv connector;
//! both handles reference the same ring. A commit is a payload write followed
//! by a release-ordered cursor publish, so a slice committed just before the
//! writer's collective is preempted stays visible to the reader. Connector
//! state is deliberately not part of a collective's saved context.

use std::cell::UnsafeCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::WireError;
use crate::registry::CollectiveId;

const UNOWNED: u64 = u64::MAX;

pub struct Connector {
    capacity: usize,
    slots: Box<[UnsafeCell<Vec<u8>>]>,
    /// Committed pushes, monotone.
    write_cursor: AtomicU64,
    /// Released pops, monotone.
    read_cursor: AtomicU64,
    /// Collective allowed to touch this ring; preempted collectives keep
    /// exclusive ownership until they complete.
    owner: AtomicU64,
    max_occupancy: AtomicU64,
}

// Single-writer/single-reader contract; cursors carry the publication order.
unsafe impl Send for Connector {}
unsafe impl Sync for Connector {}

#[derive(Debug, PartialEq, Eq)]
pub enum PushOutcome {
    Committed(u64),
    Full,
}

#[derive(Debug, PartialEq, Eq)]
pub enum PopOutcome {
    Slice(Vec<u8>, u64),
    Empty,
}

impl Connector {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        Connector {
            capacity,
            slots: (0..capacity).map(|_| UnsafeCell::new(Vec::new())).collect(),
            write_cursor: AtomicU64::new(0),
            read_cursor: AtomicU64::new(0),
            owner: AtomicU64::new(UNOWNED),
            max_occupancy: AtomicU64::new(0),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn bind_owner(&self, id: CollectiveId) {
        self.owner.store(id as u64, Ordering::Release);
    }

    fn check_owner(&self, id: CollectiveId) {
        let owner = self.owner.load(Ordering::Acquire);
        assert_eq!(
            owner, id as u64,
            "connector owned by collective {owner} touched by {id}"
        );
    }

    /// Writer-side commit. Never blocks; `Full` tells the caller to spin.
    pub fn try_push(&self, id: CollectiveId, payload: &[u8]) -> PushOutcome {
        self.check_owner(id);
        let w = self.write_cursor.load(Ordering::Relaxed);
        let r = self.read_cursor.load(Ordering::Acquire);
        debug_assert!(w - r <= self.capacity as u64, "occupancy over capacity");
        if w - r >= self.capacity as u64 {
            return PushOutcome::Full;
        }
        let slot = unsafe { &mut *self.slots[(w % self.capacity as u64) as usize].get() };
        slot.clear();
        slot.extend_from_slice(payload);
        self.write_cursor.store(w + 1, Ordering::Release);
        self.max_occupancy.fetch_max(w + 1 - r, Ordering::Relaxed);
        PushOutcome::Committed(w)
    }

    /// Reader-side take of the oldest committed slice.
    pub fn try_pop(&self, id: CollectiveId) -> PopOutcome {
        self.check_owner(id);
        let r = self.read_cursor.load(Ordering::Relaxed);
        let w = self.write_cursor.load(Ordering::Acquire);
        debug_assert!(w - r <= self.capacity as u64, "occupancy over capacity");
        if r == w {
            return PopOutcome::Empty;
        }
        let slot = unsafe { &mut *self.slots[(r % self.capacity as u64) as usize].get() };
        let payload = std::mem::take(slot);
        self.read_cursor.store(r + 1, Ordering::Release);
        PopOutcome::Slice(payload, r)
    }

    pub fn write_cursor(&self) -> u64 {
        self.write_cursor.load(Ordering::Acquire)
    }

    pub fn read_cursor(&self) -> u64 {
        self.read_cursor.load(Ordering::Acquire)
    }

    pub fn max_occupancy(&self) -> u64 {
        self.max_occupancy.load(Ordering::Relaxed)
    }
}

/// Audit view of one connector, collected at the end of a run.
#[derive(Debug, Clone)]
pub struct ConnectorAudit {
    pub collective: CollectiveId,
    pub lane: u32,
    pub from_rank: u32,
    pub to_rank: u32,
    pub capacity: usize,
    pub committed: u64,
    pub popped: u64,
    pub max_occupancy: u64,
}

/// World-level wiring table. Each (collective, lane, edge) triple owns
/// exactly one ring until it is recycled.
#[derive(Default)]
pub struct Fabric {
    rings: Mutex<HashMap<(CollectiveId, u32, u32, u32), Arc<Connector>>>,
}

impl Fabric {
    pub fn new() -> Self {
        Fabric::default()
    }

    /// Wire the edge `from -> to` for (collective, lane). Returns the send
    /// side handle for `from` and the recv side handle for `to`, which are
    /// the same underlying ring.
    pub fn peer_wire(
        &self,
        collective: CollectiveId,
        lane: u32,
        from: u32,
        to: u32,
        capacity: usize,
    ) -> Result<(Arc<Connector>, Arc<Connector>), WireError> {
        let mut rings = self.rings.lock().unwrap();
        let key = (collective, lane, from, to);
        if rings.contains_key(&key) {
            return Err(WireError::AlreadyWired {
                collective,
                lane,
                from,
                to,
            });
        }
        let ring = Arc::new(Connector::new(capacity));
        ring.bind_owner(collective);
        rings.insert(key, Arc::clone(&ring));
        Ok((Arc::clone(&ring), ring))
    }

    pub fn audits(&self) -> Vec<ConnectorAudit> {
        let rings = self.rings.lock().unwrap();
        rings
            .iter()
            .map(|(&(collective, lane, from, to), ring)| ConnectorAudit {
                collective,
                lane,
                from_rank: from,
                to_rank: to,
                capacity: ring.capacity(),
                committed: ring.write_cursor(),
                popped: ring.read_cursor(),
                max_occupancy: ring.max_occupancy(),
            })
            .collect()
    }
}
