//! The per-rank daemon: lane scheduler loops, context cache, completion
//! counters, and the per-lane state that survives voluntary quits.
//!
//! A lane admits collectives from the SQ into its task queue, runs each
//! entry's primitives under the entry's spin threshold, preempts on stall,
//! and posts a CQE when the last lane of a collective finishes. When nothing
//! can move and no submissions arrive, the lane quits; the supervisor in the
//! runtime module restarts it when there is reason to.

use std::collections::HashMap;
use std::collections::HashSet;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use crate::config::{Config, Mode};
use crate::connector::Connector;
use crate::error::CorruptContext;
use crate::events::{event, Event, EventKind, EventLog, Stats};
use crate::primitive::{exec_step, expected_transfers, DynamicContext, StaticContext, StepOutcome};
use crate::queues::{CompletionQueue, Sq, Sqe};
use crate::registry::{plan_geometry, CollectiveId, Registry};
use crate::ring::build_sequence;
use crate::stickiness::{boosted_threshold, initial_threshold, OrderPolicy};

/// Connector endpoints of one (collective, lane) on this rank.
#[derive(Clone, Default)]
pub struct Wiring {
    pub send: Option<Arc<Connector>>,
    pub recv: Option<Arc<Connector>>,
}

/// Everything a rank's lanes, supervisor, and host share.
pub struct RankShared {
    pub rank: u32,
    pub cfg: Config,
    pub registry: Mutex<Registry>,
    pub sq: Sq,
    pub cq: Arc<dyn CompletionQueue>,
    pub wiring: Mutex<HashMap<(CollectiveId, u32), Wiring>>,
    pub completion: CompletionBoard,
    pub lane_states: Vec<Mutex<Option<LaneState>>>,
    pub stats: Stats,
    pub events: Arc<EventLog>,
    /// World-wide teardown flag; every loop polls it.
    pub abort: Arc<AtomicBool>,
    /// World-wide progress counter for quiescence detection.
    pub progress: Arc<AtomicU64>,
    /// Non-exiting SQEs pushed on this rank.
    pub submitted: AtomicU64,
    /// CQEs posted on this rank.
    pub completed: AtomicU64,
    /// Ids with a submission whose callback has not fired yet.
    pub outstanding: Mutex<HashSet<CollectiveId>>,
}

/// Per-collective lanes-finished counters; the arrival that reaches the
/// target wins the right to post the CQE and resets the counter.
#[derive(Default)]
pub struct CompletionBoard {
    counters: Mutex<HashMap<CollectiveId, u32>>,
}

impl CompletionBoard {
    pub fn arrive(&self, id: CollectiveId, target: u32) -> bool {
        let mut map = self.counters.lock().unwrap();
        let c = map.entry(id).or_insert(0);
        *c += 1;
        if *c == target {
            map.remove(&id);
            true
        } else {
            false
        }
    }
}

/// A saved (static, dynamic) context pair of an unfinished collective,
/// parked in the lane's persistent state between daemon incarnations.
pub struct SavedTask {
    pub id: CollectiveId,
    pub sctx: Arc<StaticContext>,
    pub dctx: DynamicContext,
    /// Baseline-mode stream slot; unused by the preemptive scheduler.
    pub slot: u32,
}

/// Lane state that outlives the daemon: the SQ cursor, the exit latch, and
/// the parked contexts. Owned by the lane thread while it runs.
#[derive(Default)]
pub struct LaneState {
    pub sq_cursor: u64,
    pub got_exit: bool,
    /// Collectives admitted ever, for baseline stream-slot assignment.
    pub admitted: u64,
    pub saved: Vec<SavedTask>,
}

struct Task {
    id: CollectiveId,
    sctx: Arc<StaticContext>,
    threshold: u64,
    stall_streak: u64,
    was_preempted: bool,
}

/// Direct-mapped cache of loaded dynamic contexts, way = id mod ways.
/// Contexts move between the cache and the lane's backing map; only dirty
/// (progressed) contexts count as saves.
pub struct ContextCache {
    ways: Vec<Option<Way>>,
    saves: u64,
}

struct Way {
    id: CollectiveId,
    dctx: DynamicContext,
    dirty: bool,
}

pub type Backing = HashMap<CollectiveId, DynamicContext>;

impl ContextCache {
    pub fn new(ways: usize) -> Self {
        assert!(ways > 0);
        ContextCache {
            ways: (0..ways).map(|_| None).collect(),
            saves: 0,
        }
    }

    fn way_of(&self, id: CollectiveId) -> usize {
        id as usize % self.ways.len()
    }

    pub fn load<'a>(
        &'a mut self,
        id: CollectiveId,
        backing: &mut Backing,
    ) -> &'a mut DynamicContext {
        let w = self.way_of(id);
        let hit = matches!(&self.ways[w], Some(way) if way.id == id);
        if !hit {
            if let Some(old) = self.ways[w].take() {
                if old.dirty {
                    self.saves += 1;
                }
                backing.insert(old.id, old.dctx);
            }
            let dctx = backing
                .remove(&id)
                .expect("context missing from backing store");
            self.ways[w] = Some(Way {
                id,
                dctx,
                dirty: false,
            });
        }
        &mut self.ways[w].as_mut().expect("way just filled").dctx
    }

    pub fn mark_dirty(&mut self, id: CollectiveId) {
        let w = self.way_of(id);
        if let Some(way) = &mut self.ways[w] {
            if way.id == id {
                way.dirty = true;
            }
        }
    }

    /// Remove a finished collective without writing it back.
    pub fn discard(&mut self, id: CollectiveId) {
        let w = self.way_of(id);
        if matches!(&self.ways[w], Some(way) if way.id == id) {
            self.ways[w] = None;
        }
    }

    /// Park everything back into the backing map (quit path).
    pub fn flush(&mut self, backing: &mut Backing) {
        for slot in &mut self.ways {
            if let Some(way) = slot.take() {
                if way.dirty {
                    self.saves += 1;
                }
                backing.insert(way.id, way.dctx);
            }
        }
    }

    /// Dirty write-backs performed so far (lazy-save observability).
    pub fn saves(&self) -> u64 {
        self.saves
    }
}

/// Build the immutable execution context for one admitted submission.
fn build_static(shared: &RankShared, lane: u32, sqe: &Sqe) -> Option<Arc<StaticContext>> {
    let registry = shared.registry.lock().unwrap();
    let reg = registry
        .get(sqe.collective)
        .expect("submission validated against registry at submit time");
    let meta = reg.meta.clone();
    drop(registry);
    if lane >= meta.lanes_used {
        return None;
    }
    let plan = plan_geometry(&meta, sqe.elem_count, lane, &shared.cfg);
    let seq = build_sequence(meta.kind, meta.nranks, meta.rank, meta.root);
    let (send_conn, recv_conn) = if meta.nranks == 1 {
        (None, None)
    } else {
        let wiring = shared.wiring.lock().unwrap();
        let w = wiring
            .get(&(sqe.collective, lane))
            .expect("collective wired at registration")
            .clone();
        (
            if seq.uses_send() { w.send } else { None },
            if seq.uses_recv() { w.recv } else { None },
        )
    };
    let send_base_seq = send_conn.as_ref().map_or(0, |c| c.write_cursor());
    let recv_base_seq = recv_conn.as_ref().map_or(0, |c| c.read_cursor());
    Some(Arc::new(StaticContext {
        id: sqe.collective,
        plan,
        seq,
        send_buf: sqe.send_buf.clone(),
        recv_buf: sqe.recv_buf.clone(),
        elem_count: sqe.elem_count,
        reduce_fn: meta.reduce_fn,
        root: meta.root,
        send_conn,
        recv_conn,
        lane,
        send_base_seq,
        recv_base_seq,
        meta,
    }))
}

fn ev_with(
    kind: EventKind,
    shared: &RankShared,
    lane: u32,
    queue_len: usize,
    task: Option<(&Task, &DynamicContext)>,
) -> Event {
    let mut e = event(kind, shared.rank, lane, queue_len);
    if let Some((t, d)) = task {
        e.collective_id = Some(t.id);
        e.loop_id = Some(d.loop_id);
        e.step = Some(d.step_id);
        e.slice = Some(d.slice_id);
        e.spins = Some(d.spins_used);
    }
    e
}

/// Finish bookkeeping for a collective this lane just completed; returns
/// true when this lane was the last and posted the CQE.
fn finish_collective(shared: &RankShared, task: &Task) -> bool {
    let target = task.sctx.meta.lanes_used;
    if shared.completion.arrive(task.id, target) {
        let t0 = Instant::now();
        shared.cq.write(task.id);
        shared.completed.fetch_add(1, Ordering::AcqRel);
        shared
            .stats
            .write_cqe_ns
            .fetch_add(t0.elapsed().as_nanos() as u64, Ordering::Relaxed);
        true
    } else {
        false
    }
}

/// Decision of the per-round voluntary-quit evaluation.
pub fn voluntary_quit_check(
    queue_empty: bool,
    all_stalled: bool,
    rounds_since_fetch: u64,
    cfg: &Config,
) -> bool {
    (queue_empty || all_stalled) && rounds_since_fetch >= cfg.idle_rounds_limit
}

/// Preemptive scheduler loop of one lane. Returns when the lane voluntarily
/// quits, consumes the exit entry with a drained queue, or is aborted.
pub fn lane_loop(
    shared: &RankShared,
    lane: u32,
    state: &mut LaneState,
) -> Result<(), CorruptContext> {
    let cfg = &shared.cfg;
    debug_assert_eq!(cfg.mode, Mode::Occl);
    let mut cache = ContextCache::new(cfg.cache_ways);
    let mut backing: Backing = HashMap::new();
    let mut queue: Vec<Task> = Vec::new();
    for (pos, saved) in state.saved.drain(..).enumerate() {
        backing.insert(saved.id, saved.dctx);
        queue.push(Task {
            id: saved.id,
            sctx: saved.sctx,
            threshold: initial_threshold(pos, &cfg.spin),
            stall_streak: 0,
            was_preempted: false,
        });
    }
    shared.stats.starts.fetch_add(1, Ordering::Relaxed);
    shared
        .events
        .record(event(EventKind::Start, shared.rank, lane, queue.len()));

    let mut round: u64 = 0;
    let mut rounds_since_fetch: u64 = 0;
    let park = |cache: &mut ContextCache,
                backing: &mut Backing,
                queue: &mut Vec<Task>,
                state: &mut LaneState| {
        cache.flush(backing);
        state.saved = queue
            .drain(..)
            .map(|t| SavedTask {
                id: t.id,
                dctx: backing.remove(&t.id).expect("parked context"),
                sctx: t.sctx,
                slot: 0,
            })
            .collect();
    };

    loop {
        if shared.abort.load(Ordering::Acquire) {
            park(&mut cache, &mut backing, &mut queue, state);
            return Ok(());
        }
        round += 1;
        shared.stats.rounds.fetch_add(1, Ordering::Relaxed);

        // (a) Admit new SQEs per the order policy's fetch gate.
        let all_stalled = !queue.is_empty()
            && queue
                .iter()
                .all(|t| t.stall_streak >= cfg.stall_rounds_limit);
        let cadence_ok = round % cfg.order_policy.fetch_cadence() == 0;
        let may_fetch = cfg.eager_fetch
            || match cfg.order_policy {
                OrderPolicy::Fifo => cadence_ok && (queue.is_empty() || all_stalled),
                OrderPolicy::PriorityFront => cadence_ok,
            };
        let mut fetched = false;
        if may_fetch {
            let t0 = Instant::now();
            while let Some(sqe) = shared.sq.read(&mut state.sq_cursor) {
                fetched = true;
                if sqe.is_exiting() {
                    state.got_exit = true;
                    continue;
                }
                let Some(sctx) = build_static(shared, lane, &sqe) else {
                    continue; // lane not used by this collective
                };
                backing.insert(sqe.collective, DynamicContext::fresh(sctx.seq.steps.len()));
                let task = Task {
                    id: sqe.collective,
                    sctx,
                    threshold: 0,
                    stall_streak: 0,
                    was_preempted: false,
                };
                match cfg.order_policy {
                    OrderPolicy::Fifo => queue.push(task),
                    OrderPolicy::PriorityFront => queue.insert(0, task),
                }
                // Reassign position-based thresholds across the queue.
                for (pos, t) in queue.iter_mut().enumerate() {
                    if t.threshold == 0 {
                        t.threshold = initial_threshold(pos, &cfg.spin);
                    }
                }
                shared.stats.note_fetch_queue_len(queue.len());
                let mut e = event(EventKind::Fetch, shared.rank, lane, queue.len());
                e.collective_id = Some(sqe.collective);
                shared.events.record(e);
            }
            shared
                .stats
                .read_sqe_ns
                .fetch_add(t0.elapsed().as_nanos() as u64, Ordering::Relaxed);
        }
        if fetched {
            rounds_since_fetch = 0;
        } else {
            rounds_since_fetch += 1;
        }

        // (b)/(c) Traverse the task queue, giving each entry its threshold.
        let mut idx = 0;
        while idx < queue.len() {
            if shared.abort.load(Ordering::Acquire) {
                break;
            }
            let task = &mut queue[idx];
            let dctx = cache.load(task.id, &mut backing);
            if task.was_preempted {
                task.was_preempted = false;
                shared.events.record(ev_with(
                    EventKind::Resume,
                    shared,
                    lane,
                    0,
                    Some((task, dctx)),
                ));
            }
            let t0 = Instant::now();
            let mut finished = false;
            let mut made_progress = false;
            loop {
                match exec_step(&task.sctx, dctx, task.threshold)? {
                    StepOutcome::StepDone => {
                        task.threshold = boosted_threshold(task.threshold, &cfg.spin);
                        task.stall_streak = 0;
                    }
                    StepOutcome::Stalled(_) => {
                        if dctx.progressed {
                            dctx.progressed = false;
                            made_progress = true;
                            shared.progress.fetch_add(1, Ordering::Relaxed);
                            task.threshold = boosted_threshold(task.threshold, &cfg.spin);
                            task.stall_streak = 0;
                        } else {
                            task.stall_streak += 1;
                        }
                        dctx.spins_used = 0;
                        task.was_preempted = true;
                        shared.stats.note_preempt(task.id);
                        shared.events.record(ev_with(
                            EventKind::Preempt,
                            shared,
                            lane,
                            0,
                            Some((task, dctx)),
                        ));
                        break;
                    }
                    StepOutcome::CollectiveDone => {
                        audit_transfers(task.id, &task.sctx, dctx)?;
                        finished = true;
                        break;
                    }
                }
            }
            if made_progress {
                cache.mark_dirty(task.id);
            }
            shared
                .stats
                .execute_ns
                .fetch_add(t0.elapsed().as_nanos() as u64, Ordering::Relaxed);
            if finished {
                shared.progress.fetch_add(1, Ordering::Relaxed);
                let task = queue.remove(idx);
                cache.discard(task.id);
                backing.remove(&task.id);
                finish_collective(shared, &task);
                shared.events.record(
                    ev_with(EventKind::Complete, shared, lane, queue.len(), None).with_id(task.id),
                );
            } else {
                idx += 1;
            }
        }

        // (d) Exit and voluntary-quit evaluation.
        if state.got_exit && queue.is_empty() {
            park(&mut cache, &mut backing, &mut queue, state);
            return Ok(());
        }
        let all_stalled = !queue.is_empty()
            && queue
                .iter()
                .all(|t| t.stall_streak >= cfg.stall_rounds_limit);
        if voluntary_quit_check(queue.is_empty(), all_stalled, rounds_since_fetch, cfg) {
            shared.stats.quits.fetch_add(1, Ordering::Relaxed);
            shared
                .events
                .record(event(EventKind::Quit, shared.rank, lane, queue.len()));
            park(&mut cache, &mut backing, &mut queue, state);
            return Ok(());
        }
        // Single-core friendliness: give peer ranks a turn every round.
        std::thread::yield_now();
    }
}

/// At completion, every step must have moved exactly the planned number of
/// slices: nothing lost, nothing retransmitted across preemptions.
fn audit_transfers(
    id: CollectiveId,
    sctx: &StaticContext,
    dctx: &DynamicContext,
) -> Result<(), CorruptContext> {
    let (want_push, want_pop) = expected_transfers(sctx);
    if dctx.pushes_per_step != want_push || dctx.pops_per_step != want_pop {
        return Err(CorruptContext {
            collective: id,
            detail: format!(
                "transfer audit: pushes {:?} (want {:?}), pops {:?} (want {:?})",
                dctx.pushes_per_step, want_push, dctx.pops_per_step, want_pop
            ),
        });
    }
    Ok(())
}

impl Event {
    fn with_id(mut self, id: CollectiveId) -> Event {
        self.collective_id = Some(id);
        self
    }
}

/// Non-preemptive negative control: fixed stream slots, strict in-order
/// execution per slot, round-robin between slot heads, no preemption and no
/// quit while any stream has work.
pub fn lane_loop_baseline(
    shared: &RankShared,
    lane: u32,
    state: &mut LaneState,
) -> Result<(), CorruptContext> {
    let cfg = &shared.cfg;
    debug_assert_eq!(cfg.mode, Mode::Baseline);
    let slots = cfg.stream_slots.max(1) as usize;
    let mut streams: Vec<std::collections::VecDeque<Task>> =
        (0..slots).map(|_| Default::default()).collect();
    let mut cache = ContextCache::new(cfg.cache_ways);
    let mut backing: Backing = HashMap::new();
    for saved in state.saved.drain(..) {
        backing.insert(saved.id, saved.dctx);
        streams[saved.slot as usize].push_back(Task {
            id: saved.id,
            sctx: saved.sctx,
            threshold: cfg.baseline_quantum,
            stall_streak: 0,
            was_preempted: false,
        });
    }
    shared.stats.starts.fetch_add(1, Ordering::Relaxed);
    shared
        .events
        .record(event(EventKind::Start, shared.rank, lane, 0));

    let mut rounds_since_fetch: u64 = 0;
    loop {
        if shared.abort.load(Ordering::Acquire) {
            break;
        }
        shared.stats.rounds.fetch_add(1, Ordering::Relaxed);
        let mut fetched = false;
        while let Some(sqe) = shared.sq.read(&mut state.sq_cursor) {
            fetched = true;
            if sqe.is_exiting() {
                state.got_exit = true;
                continue;
            }
            let Some(sctx) = build_static(shared, lane, &sqe) else {
                continue;
            };
            let slot = (state.admitted % slots as u64) as usize;
            state.admitted += 1;
            backing.insert(sqe.collective, DynamicContext::fresh(sctx.seq.steps.len()));
            streams[slot].push_back(Task {
                id: sqe.collective,
                sctx,
                threshold: cfg.baseline_quantum,
                stall_streak: 0,
                was_preempted: false,
            });
            shared
                .stats
                .note_fetch_queue_len(streams.iter().map(|s| s.len()).sum());
        }
        rounds_since_fetch = if fetched { 0 } else { rounds_since_fetch + 1 };

        let mut any_work = false;
        for s in 0..slots {
            if shared.abort.load(Ordering::Acquire) {
                break;
            }
            let Some(task) = streams[s].front_mut() else {
                continue;
            };
            any_work = true;
            let dctx = cache.load(task.id, &mut backing);
            let t0 = Instant::now();
            let mut finished = false;
            let mut made_progress = false;
            loop {
                match exec_step(&task.sctx, dctx, cfg.baseline_quantum)? {
                    StepOutcome::StepDone => {}
                    StepOutcome::Stalled(_) => {
                        if dctx.progressed {
                            dctx.progressed = false;
                            made_progress = true;
                            shared.progress.fetch_add(1, Ordering::Relaxed);
                        }
                        dctx.spins_used = 0;
                        break;
                    }
                    StepOutcome::CollectiveDone => {
                        audit_transfers(task.id, &task.sctx, dctx)?;
                        finished = true;
                        break;
                    }
                }
            }
            if made_progress {
                cache.mark_dirty(task.id);
            }
            shared
                .stats
                .execute_ns
                .fetch_add(t0.elapsed().as_nanos() as u64, Ordering::Relaxed);
            if finished {
                shared.progress.fetch_add(1, Ordering::Relaxed);
                let task = streams[s].pop_front().expect("head just ran");
                cache.discard(task.id);
                backing.remove(&task.id);
                finish_collective(shared, &task);
                shared
                    .events
                    .record(event(EventKind::Complete, shared.rank, lane, 0).with_id(task.id));
            }
        }

        let drained = streams.iter().all(|s| s.is_empty());
        if drained && state.got_exit {
            return Ok(());
        }
        // Idle-exit only with every stream empty: a baseline daemon never
        // abandons stuck work, which is exactly why it can deadlock.
        if drained && rounds_since_fetch >= cfg.idle_rounds_limit {
            shared.stats.quits.fetch_add(1, Ordering::Relaxed);
            shared
                .events
                .record(event(EventKind::Quit, shared.rank, lane, 0));
            return Ok(());
        }
        let _ = any_work;
        std::thread::yield_now();
    }
    // Abort teardown: park remaining work for post-mortem inspection.
    cache.flush(&mut backing);
    for (s, stream) in streams.iter_mut().enumerate() {
        for t in stream.drain(..) {
            state.saved.push(SavedTask {
                id: t.id,
                dctx: backing.remove(&t.id).expect("parked context"),
                sctx: t.sctx,
                slot: s as u32,
            });
        }
    }
    Ok(())
}

/// Entry point used by the supervisor for the configured mode.
pub fn run_lane(
    shared: &RankShared,
    lane: u32,
    state: &mut LaneState,
) -> Result<(), CorruptContext> {
    match shared.cfg.mode {
        Mode::Occl => lane_loop(shared, lane, state),
        Mode::Baseline => lane_loop_baseline(shared, lane, state),
    }
}
