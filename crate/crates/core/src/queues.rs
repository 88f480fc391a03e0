//! The SQ/CQ boundary between the host and the daemon lanes.
//!
//! The submission queue is a single-producer multi-consumer ring: every lane
//! reads every entry through a private cursor, and the lane whose counter
//! increment makes the entry fully consumed frees the slot. Completions
//! travel back through one of three interchangeable completion queues and a
//! host-side poller that dispatches bound callbacks.

use std::cell::UnsafeCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::buffer::SharedBuffer;
use crate::config::CqImpl;
use crate::error::SubmitError;
use crate::registry::{CollectiveId, ReduceFn};

/// Sentinel id: final entry, tells every lane to exit after draining.
pub const EXITING: CollectiveId = CollectiveId::MAX;

#[derive(Debug, Clone)]
pub struct Sqe {
    pub collective: CollectiveId,
    pub send_buf: SharedBuffer,
    pub recv_buf: SharedBuffer,
    pub elem_count: usize,
    pub reduce_fn: Option<ReduceFn>,
    pub root: Option<u32>,
    pub seq: u64,
}

impl Sqe {
    pub fn exiting(seq: u64) -> Self {
        Sqe {
            collective: EXITING,
            send_buf: SharedBuffer::zeroed(0),
            recv_buf: SharedBuffer::zeroed(0),
            elem_count: 0,
            reduce_fn: None,
            root: None,
            seq,
        }
    }

    pub fn is_exiting(&self) -> bool {
        self.collective == EXITING
    }
}

struct SqSlot {
    /// 0 = free; seq + 1 = published entry with that sequence number.
    state: AtomicU64,
    consumers: AtomicU32,
    payload: UnsafeCell<Option<Sqe>>,
}

/// Single-producer multi-consumer submission ring.
pub struct Sq {
    slots: Box<[SqSlot]>,
    lane_count: u32,
    tail: AtomicU64,
    /// Entries whose slot has been freed by the last consumer.
    freed: AtomicU64,
    exiting_pushed: AtomicBool,
}

// Payload cells are written by the single producer while the slot is free
// and only read by consumers while it is published.
unsafe impl Send for Sq {}
unsafe impl Sync for Sq {}

impl Sq {
    pub fn new(capacity: usize, lane_count: u32) -> Self {
        assert!(capacity > 0 && lane_count > 0);
        Sq {
            slots: (0..capacity)
                .map(|_| SqSlot {
                    state: AtomicU64::new(0),
                    consumers: AtomicU32::new(0),
                    payload: UnsafeCell::new(None),
                })
                .collect(),
            lane_count,
            tail: AtomicU64::new(0),
            freed: AtomicU64::new(0),
            exiting_pushed: AtomicBool::new(false),
        }
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    /// Host-side push; `Full` is retriable, `SubmitAfterExit` is not.
    pub fn push(&self, mut sqe: Sqe) -> Result<u64, SubmitError> {
        if self.exiting_pushed.load(Ordering::Acquire) {
            return Err(SubmitError::SubmitAfterExit);
        }
        let t = self.tail.load(Ordering::Relaxed);
        let slot = &self.slots[(t % self.slots.len() as u64) as usize];
        if slot.state.load(Ordering::Acquire) != 0 {
            return Err(SubmitError::Full);
        }
        sqe.seq = t;
        if sqe.is_exiting() {
            self.exiting_pushed.store(true, Ordering::Release);
        }
        unsafe { *slot.payload.get() = Some(sqe) };
        slot.consumers.store(0, Ordering::Relaxed);
        slot.state.store(t + 1, Ordering::Release);
        self.tail.store(t + 1, Ordering::Release);
        Ok(t)
    }

    /// Lane-side read at the lane's private cursor. Advances the cursor on
    /// a hit; the last consumer of an entry frees its slot.
    pub fn read(&self, cursor: &mut u64) -> Option<Sqe> {
        let c = *cursor;
        let slot = &self.slots[(c % self.slots.len() as u64) as usize];
        if slot.state.load(Ordering::Acquire) != c + 1 {
            return None;
        }
        let sqe = unsafe { (*slot.payload.get()).clone() }.expect("published slot without payload");
        debug_assert_eq!(sqe.seq, c);
        *cursor = c + 1;
        let prev = slot.consumers.fetch_add(1, Ordering::AcqRel);
        if prev + 1 == self.lane_count {
            slot.state.store(0, Ordering::Release);
            self.freed.fetch_add(1, Ordering::AcqRel);
        }
        Some(sqe)
    }

    /// Pushed entries not yet fully consumed by every lane.
    pub fn in_flight(&self) -> u64 {
        self.tail.load(Ordering::Acquire) - self.freed.load(Ordering::Acquire)
    }

    pub fn pushed(&self) -> u64 {
        self.tail.load(Ordering::Acquire)
    }

    pub fn exit_pushed(&self) -> bool {
        self.exiting_pushed.load(Ordering::Acquire)
    }
}

/// Completion queue contract shared by the three implementations: many lane
/// writers, one poller reader, every id delivered exactly once.
pub trait CompletionQueue: Send + Sync {
    fn write(&self, id: CollectiveId);
    fn try_read(&self) -> Option<CollectiveId>;
}

pub fn make_cq(which: CqImpl, capacity: usize, registry_max: usize) -> Arc<dyn CompletionQueue> {
    match which {
        CqImpl::Vanilla => Arc::new(VanillaCq::new(capacity)),
        CqImpl::Packed => Arc::new(PackedCq::new(capacity)),
        CqImpl::Slot => Arc::new(SlotCq::new(registry_max)),
    }
}

/// V1: id slot plus a separate valid flag, published across an explicit
/// fence. Writers reserve a tail position and wait out slot reuse.
pub struct VanillaCq {
    ids: Box<[UnsafeCell<CollectiveId>]>,
    valid: Box<[AtomicBool]>,
    tail: AtomicU64,
    head: AtomicU64,
}

unsafe impl Send for VanillaCq {}
unsafe impl Sync for VanillaCq {}

impl VanillaCq {
    pub fn new(capacity: usize) -> Self {
        VanillaCq {
            ids: (0..capacity).map(|_| UnsafeCell::new(0)).collect(),
            valid: (0..capacity).map(|_| AtomicBool::new(false)).collect(),
            tail: AtomicU64::new(0),
            head: AtomicU64::new(0),
        }
    }
}

impl CompletionQueue for VanillaCq {
    fn write(&self, id: CollectiveId) {
        let t = self.tail.fetch_add(1, Ordering::AcqRel);
        let i = (t % self.ids.len() as u64) as usize;
        // Wait until the poller has drained the previous lap of this slot.
        while self.valid[i].load(Ordering::Acquire)
            || t >= self.head.load(Ordering::Acquire) + self.ids.len() as u64
        {
            std::thread::yield_now();
        }
        unsafe { *self.ids[i].get() = id };
        std::sync::atomic::fence(Ordering::Release);
        self.valid[i].store(true, Ordering::Release);
    }

    fn try_read(&self) -> Option<CollectiveId> {
        let h = self.head.load(Ordering::Relaxed);
        let i = (h % self.ids.len() as u64) as usize;
        if !self.valid[i].load(Ordering::Acquire) {
            return None;
        }
        std::sync::atomic::fence(Ordering::Acquire);
        let id = unsafe { *self.ids[i].get() };
        self.valid[i].store(false, Ordering::Release);
        self.head.store(h + 1, Ordering::Release);
        Some(id)
    }
}

/// V2: tail sequence and id packed into one 64-bit word stored atomically;
/// the poller accepts a slot only when the high half equals its head.
pub struct PackedCq {
    words: Box<[AtomicU64]>,
    tail: AtomicU64,
    head: AtomicU64,
}

impl PackedCq {
    pub fn new(capacity: usize) -> Self {
        PackedCq {
            // All-ones never matches a real (tail, id) pair at the head.
            words: (0..capacity).map(|_| AtomicU64::new(u64::MAX)).collect(),
            tail: AtomicU64::new(0),
            head: AtomicU64::new(0),
        }
    }

    pub fn pack(tail: u64, id: CollectiveId) -> u64 {
        ((tail as u32 as u64) << 32) | id as u64
    }
}

impl CompletionQueue for PackedCq {
    fn write(&self, id: CollectiveId) {
        let t = self.tail.fetch_add(1, Ordering::AcqRel);
        while t >= self.head.load(Ordering::Acquire) + self.words.len() as u64 {
            std::thread::yield_now();
        }
        let i = (t % self.words.len() as u64) as usize;
        self.words[i].store(Self::pack(t, id), Ordering::Release);
    }

    fn try_read(&self) -> Option<CollectiveId> {
        let h = self.head.load(Ordering::Relaxed);
        let i = (h % self.words.len() as u64) as usize;
        let w = self.words[i].load(Ordering::Acquire);
        if (w >> 32) as u32 != h as u32 {
            return None;
        }
        self.head.store(h + 1, Ordering::Release);
        Some(w as u32)
    }
}

/// V3: no ring; slot index is the collective id itself, claimed by a single
/// compare-and-swap from the empty sentinel. A writer finding its slot
/// occupied waits for the poller to clear it.
pub struct SlotCq {
    slots: Box<[AtomicU64]>,
    /// Rotating scan start so no id starves the others.
    cursor: AtomicU64,
}

const SLOT_EMPTY: u64 = u64::MAX;

impl SlotCq {
    pub fn new(registry_max: usize) -> Self {
        SlotCq {
            slots: (0..registry_max)
                .map(|_| AtomicU64::new(SLOT_EMPTY))
                .collect(),
            cursor: AtomicU64::new(0),
        }
    }
}

impl CompletionQueue for SlotCq {
    fn write(&self, id: CollectiveId) {
        let slot = &self.slots[id as usize];
        while slot
            .compare_exchange(SLOT_EMPTY, id as u64, Ordering::AcqRel, Ordering::Acquire)
            .is_err()
        {
            std::thread::yield_now();
        }
    }

    fn try_read(&self) -> Option<CollectiveId> {
        let n = self.slots.len() as u64;
        let start = self.cursor.load(Ordering::Relaxed);
        for off in 0..n {
            let i = ((start + off) % n) as usize;
            let w = self.slots[i].load(Ordering::Acquire);
            if w != SLOT_EMPTY {
                self.slots[i].store(SLOT_EMPTY, Ordering::Release);
                self.cursor.store((start + off + 1) % n, Ordering::Relaxed);
                return Some(w as u32);
            }
        }
        None
    }
}

type Callback = Box<dyn FnMut(CollectiveId) + Send>;

/// Host-side poller: drains the CQ and fires the callback bound to each id.
pub struct Poller {
    cq: Arc<dyn CompletionQueue>,
    callbacks: Mutex<HashMap<CollectiveId, Callback>>,
    unknown: AtomicU64,
    fired: AtomicU64,
}

impl Poller {
    pub fn new(cq: Arc<dyn CompletionQueue>) -> Self {
        Poller {
            cq,
            callbacks: Mutex::new(HashMap::new()),
            unknown: AtomicU64::new(0),
            fired: AtomicU64::new(0),
        }
    }

    pub fn cq(&self) -> &dyn CompletionQueue {
        &*self.cq
    }

    /// Bind (or rebind, between submissions) the callback for `id`.
    pub fn bind(&self, id: CollectiveId, cb: Callback) {
        self.callbacks.lock().unwrap().insert(id, cb);
    }

    /// Drain everything currently visible; returns callbacks fired.
    pub fn poll_and_dispatch(&self) -> usize {
        let mut n = 0;
        while let Some(id) = self.cq.try_read() {
            let mut map = self.callbacks.lock().unwrap();
            match map.get_mut(&id) {
                Some(cb) => {
                    cb(id);
                    n += 1;
                    self.fired.fetch_add(1, Ordering::Relaxed);
                }
                None => {
                    self.unknown.fetch_add(1, Ordering::Relaxed);
                }
            }
        }
        n
    }

    pub fn unknown_count(&self) -> u64 {
        self.unknown.load(Ordering::Relaxed)
    }

    pub fn fired_count(&self) -> u64 {
        self.fired.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sqe(id: CollectiveId) -> Sqe {
        Sqe {
            collective: id,
            send_buf: SharedBuffer::zeroed(4),
            recv_buf: SharedBuffer::zeroed(4),
            elem_count: 1,
            reduce_fn: None,
            root: None,
            seq: 0,
        }
    }

    #[test]
    fn sq_full_at_capacity() {
        let sq = Sq::new(16, 1);
        for i in 0..16 {
            sq.push(sqe(i)).unwrap();
        }
        assert_eq!(sq.push(sqe(99)), Err(SubmitError::Full));
    }

    #[test]
    fn sq_rejects_after_exiting() {
        let sq = Sq::new(8, 1);
        sq.push(Sqe::exiting(0)).unwrap();
        assert_eq!(sq.push(sqe(0)), Err(SubmitError::SubmitAfterExit));
    }

    #[test]
    fn sq_every_lane_sees_push_order_and_slots_recycle() {
        let sq = Sq::new(4, 3);
        let mut cursors = [0u64; 3];
        for round in 0..10u32 {
            sq.push(sqe(round)).unwrap();
            for c in cursors.iter_mut() {
                assert_eq!(sq.read(c).unwrap().collective, round);
                assert!(sq.read(c).is_none());
            }
            assert_eq!(sq.in_flight(), 0);
        }
    }

    #[test]
    fn sq_concurrent_lanes_observe_push_order() {
        let sq = Arc::new(Sq::new(8, 3));
        let total = 100u32;
        let mut handles = vec![];
        for _ in 0..3 {
            let sq = Arc::clone(&sq);
            handles.push(std::thread::spawn(move || {
                let mut cursor = 0u64;
                let mut seen = vec![];
                while seen.len() < total as usize {
                    if let Some(e) = sq.read(&mut cursor) {
                        seen.push(e.collective);
                    } else {
                        std::thread::yield_now();
                    }
                }
                seen
            }));
        }
        let mut pushed = 0u32;
        while pushed < total {
            if sq.push(sqe(pushed)).is_ok() {
                pushed += 1;
            }
        }
        for h in handles {
            assert_eq!(h.join().unwrap(), (0..total).collect::<Vec<_>>());
        }
        assert_eq!(sq.in_flight(), 0);
    }

    #[test]
    fn packed_word_layout() {
        assert_eq!(PackedCq::pack(5, 7), 0x0000_0005_0000_0007);
        let cq = PackedCq::new(8);
        cq.head.store(5, Ordering::Relaxed);
        cq.tail.store(5, Ordering::Relaxed);
        cq.write(7);
        assert_eq!(cq.try_read(), Some(7));
        assert_eq!(cq.head.load(Ordering::Relaxed), 6);
    }

    fn stress(which: CqImpl) -> Vec<u32> {
        let cq: Arc<dyn CompletionQueue> = make_cq(which, 64, 1000);
        let writers = 4;
        let per = 2500u32;
        let mut handles = vec![];
        for w in 0..writers {
            let cq = Arc::clone(&cq);
            handles.push(std::thread::spawn(move || {
                // Distinct ids per writer so the slot variant never blocks
                // on its own pending writes.
                for i in 0..per {
                    cq.write((i * writers + w) % 1000);
                }
            }));
        }
        let mut got = vec![];
        while got.len() < (writers * per) as usize {
            if let Some(id) = cq.try_read() {
                got.push(id);
            } else {
                std::thread::yield_now();
            }
        }
        for h in handles {
            h.join().unwrap();
        }
        assert!(cq.try_read().is_none());
        got.sort_unstable();
        got
    }

    #[test]
    fn cq_variants_deliver_identical_multisets() {
        let expect: Vec<u32> = {
            let mut v: Vec<u32> = (0..10_000u32).map(|x| x % 1000).collect();
            v.sort_unstable();
            v
        };
        for which in [CqImpl::Vanilla, CqImpl::Packed, CqImpl::Slot] {
            assert_eq!(stress(which), expect, "{which:?}");
        }
    }

    #[test]
    fn poller_fires_exactly_per_completion() {
        let poller = Arc::new(Poller::new(make_cq(CqImpl::Vanilla, 64, 1000)));
        let counts = Arc::new(Mutex::new(HashMap::<u32, u32>::new()));
        for id in 0..8u32 {
            let counts = Arc::clone(&counts);
            poller.bind(
                id,
                Box::new(move |i| {
                    *counts.lock().unwrap().entry(i).or_default() += 1;
                }),
            );
        }
        let mut expected = HashMap::<u32, u32>::new();
        for i in 0..1000u32 {
            let id = i % 8;
            poller.cq().write(id);
            *expected.entry(id).or_default() += 1;
            if i % 7 == 0 {
                poller.poll_and_dispatch();
            }
        }
        poller.poll_and_dispatch();
        assert_eq!(*counts.lock().unwrap(), expected);
        assert_eq!(poller.fired_count(), 1000);
        assert_eq!(poller.unknown_count(), 0);
    }

    #[test]
    fn poller_counts_unknown_ids() {
        let poller = Poller::new(make_cq(CqImpl::Slot, 64, 1000));
        poller.cq().write(42);
        assert_eq!(poller.poll_and_dispatch(), 0);
        assert_eq!(poller.unknown_count(), 1);
    }
}
