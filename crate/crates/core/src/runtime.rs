//! The in-process world: one simulated device per rank, each with its
//! submission queue, lane daemon, supervisor, and completion poller.
//!
//! The supervisor owns the daemon lifecycle: the first SQE starts it, a
//! voluntary quit ends it, and it restarts whenever the SQ is non-empty or
//! fewer CQEs than SQEs have been posted. The poller drains the CQ and runs
//! bound callbacks on the host side.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::buffer::SharedBuffer;
use crate::config::Config;
use crate::connector::{ConnectorAudit, Fabric};
use crate::daemon::{run_lane, LaneState, RankShared, Wiring};
use crate::error::{CorruptContext, RegistryError, SubmitError, WatchdogTimeout};
use crate::events::EventLog;
use crate::queues::{make_cq, Poller, Sqe};
use crate::registry::{CollectiveId, CollectiveKind, CollectiveMeta, ElemKind, ReduceFn, Registry};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WaitError {
    #[error(transparent)]
    Timeout(#[from] WatchdogTimeout),
    #[error(transparent)]
    Fault(#[from] CorruptContext),
}

struct RankCtl {
    shared: Arc<RankShared>,
    poller: Arc<Poller>,
    /// (daemon running?, change signal) — device_synchronize waits on this.
    running: Arc<(Mutex<bool>, Condvar)>,
    finished: Arc<AtomicBool>,
    fault: Arc<Mutex<Option<CorruptContext>>>,
    supervisor: Option<JoinHandle<()>>,
    poller_thread: Option<JoinHandle<()>>,
}

pub struct World {
    pub cfg: Config,
    fabric: Arc<Fabric>,
    events: Arc<EventLog>,
    abort: Arc<AtomicBool>,
    progress: Arc<AtomicU64>,
    ranks: Vec<RankCtl>,
    closed: bool,
}

impl World {
    pub fn new(cfg: Config) -> Self {
        let fabric = Arc::new(Fabric::new());
        let events = Arc::new(EventLog::new(cfg.events_enabled));
        let abort = Arc::new(AtomicBool::new(false));
        let progress = Arc::new(AtomicU64::new(0));
        let ranks = (0..cfg.nranks)
            .map(|rank| {
                let shared = Arc::new(RankShared {
                    rank,
                    cfg: cfg.clone(),
                    registry: Mutex::new(Registry::new(cfg.lanes, cfg.registry_max)),
                    sq: crate::queues::Sq::new(cfg.sq_capacity, cfg.lanes),
                    cq: make_cq(cfg.cq_impl, cfg.cq_capacity, cfg.registry_max),
                    wiring: Mutex::new(HashMap::new()),
                    completion: Default::default(),
                    lane_states: (0..cfg.lanes)
                        .map(|_| Mutex::new(Some(LaneState::default())))
                        .collect(),
                    stats: Default::default(),
                    events: Arc::clone(&events),
                    abort: Arc::clone(&abort),
                    progress: Arc::clone(&progress),
                    submitted: AtomicU64::new(0),
                    completed: AtomicU64::new(0),
                    outstanding: Mutex::new(HashSet::new()),
                });
                let poller = Arc::new(Poller::new(Arc::clone(&shared.cq)));
                let running = Arc::new((Mutex::new(false), Condvar::new()));
                let finished = Arc::new(AtomicBool::new(false));
                let fault = Arc::new(Mutex::new(None));
                let supervisor = Some(spawn_supervisor(
                    Arc::clone(&shared),
                    Arc::clone(&running),
                    Arc::clone(&finished),
                    Arc::clone(&fault),
                ));
                let poller_thread = Some(spawn_poller(
                    Arc::clone(&poller),
                    Arc::clone(&shared),
                    Arc::clone(&finished),
                ));
                RankCtl {
                    shared,
                    poller,
                    running,
                    finished,
                    fault,
                    supervisor,
                    poller_thread,
                }
            })
            .collect();
        World {
            cfg,
            fabric,
            events,
            abort,
            progress,
            ranks,
            closed: false,
        }
    }

    pub fn events(&self) -> &EventLog {
        &self.events
    }

    pub fn rank(&self, rank: u32) -> &Arc<RankShared> {
        &self.ranks[rank as usize].shared
    }

    pub fn connector_audits(&self) -> Vec<ConnectorAudit> {
        self.fabric.audits()
    }

    pub fn progress_count(&self) -> u64 {
        self.progress.load(Ordering::Acquire)
    }

    /// Register one collective on every rank (identical meta except the
    /// rank field) and wire its ring of connectors. Returns the shared id.
    pub fn register(
        &self,
        kind: CollectiveKind,
        lanes_used: u32,
        reduce_fn: Option<ReduceFn>,
        root: Option<u32>,
        elem_kind: ElemKind,
    ) -> Result<CollectiveId, RegistryError> {
        let mut id = None;
        for ctl in &self.ranks {
            let meta = CollectiveMeta {
                kind,
                nranks: self.cfg.nranks,
                rank: ctl.shared.rank,
                root,
                lanes_used,
                lane_width: 32,
                reduce_fn,
                elem_kind,
            };
            let got = ctl.shared.registry.lock().unwrap().register(meta)?;
            match id {
                None => id = Some(got),
                Some(prev) => assert_eq!(prev, got, "registries diverged"),
            }
        }
        let id = id.expect("at least one rank");
        if self.cfg.nranks > 1 {
            for lane in 0..lanes_used {
                for from in 0..self.cfg.nranks {
                    let to = (from + 1) % self.cfg.nranks;
                    let (send, recv) = self
                        .fabric
                        .peer_wire(id, lane, from, to, self.cfg.connector_capacity)
                        .expect("fresh id cannot be wired yet");
                    self.ranks[from as usize]
                        .shared
                        .wiring
                        .lock()
                        .unwrap()
                        .entry((id, lane))
                        .or_insert_with(Wiring::default)
                        .send = Some(send);
                    self.ranks[to as usize]
                        .shared
                        .wiring
                        .lock()
                        .unwrap()
                        .entry((id, lane))
                        .or_insert_with(Wiring::default)
                        .recv = Some(recv);
                }
            }
        }
        Ok(id)
    }

    /// Submit a collective on one rank. The callback fires on that rank's
    /// poller when the collective completes there.
    pub fn submit(
        &self,
        rank: u32,
        id: CollectiveId,
        send_buf: SharedBuffer,
        recv_buf: SharedBuffer,
        elem_count: usize,
        callback: Box<dyn FnMut() + Send>,
    ) -> Result<(), SubmitError> {
        let ctl = &self.ranks[rank as usize];
        let shared = &ctl.shared;
        if self.abort.load(Ordering::Acquire) {
            return Err(SubmitError::Aborted);
        }
        let meta = {
            let registry = shared.registry.lock().unwrap();
            registry
                .get(id)
                .ok_or(SubmitError::UnknownCollective(id))?
                .meta
                .clone()
        };
        {
            let mut outstanding = shared.outstanding.lock().unwrap();
            if !outstanding.insert(id) {
                return Err(SubmitError::DuplicateSubmission(id));
            }
        }
        let shared_cb = Arc::clone(shared);
        let mut user_cb = callback;
        ctl.poller.bind(
            id,
            Box::new(move |done_id| {
                shared_cb.outstanding.lock().unwrap().remove(&done_id);
                user_cb();
            }),
        );
        let sqe = Sqe {
            collective: id,
            send_buf,
            recv_buf,
            elem_count,
            reduce_fn: meta.reduce_fn,
            root: meta.root,
            seq: 0,
        };
        loop {
            match shared.sq.push(sqe.clone()) {
                Ok(_) => break,
                Err(SubmitError::Full) => {
                    if self.abort.load(Ordering::Acquire) {
                        shared.outstanding.lock().unwrap().remove(&id);
                        return Err(SubmitError::Aborted);
                    }
                    std::thread::yield_now();
                }
                Err(e) => {
                    shared.outstanding.lock().unwrap().remove(&id);
                    return Err(e);
                }
            }
        }
        shared.submitted.fetch_add(1, Ordering::AcqRel);
        Ok(())
    }

    /// Block until no lane of the rank is running and its SQ is drained.
    /// With the preemptive daemon this returns even when collectives are
    /// still pending (they resume on the next submission); with the
    /// baseline scheduler stuck work keeps the daemon alive until the
    /// watchdog fires.
    pub fn device_synchronize(&self, rank: u32, timeout: Duration) -> Result<(), WatchdogTimeout> {
        let ctl = &self.ranks[rank as usize];
        let deadline = Instant::now() + timeout;
        let (lock, cvar) = &*ctl.running;
        let mut running = lock.lock().unwrap();
        loop {
            if !*running && ctl.shared.sq.in_flight() == 0 {
                return Ok(());
            }
            if self.abort.load(Ordering::Acquire) {
                return Ok(());
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(WatchdogTimeout(timeout));
            }
            let (guard, _) = cvar
                .wait_timeout(running, (deadline - now).min(Duration::from_millis(5)))
                .unwrap();
            running = guard;
        }
    }

    /// Wait for every outstanding submission on every rank to complete.
    /// `quiescence`: treat that long without any world-wide progress as a
    /// deadlock and fail early (used by the baseline negative controls).
    pub fn wait_all(
        &self,
        timeout: Duration,
        quiescence: Option<Duration>,
    ) -> Result<(), WaitError> {
        let start = Instant::now();
        let deadline = start + timeout;
        let mut last_progress = self.progress_count();
        let mut last_change = Instant::now();
        loop {
            if let Some(fault) = self.first_fault() {
                return Err(WaitError::Fault(fault));
            }
            let done = self
                .ranks
                .iter()
                .all(|ctl| ctl.shared.outstanding.lock().unwrap().is_empty());
            if done {
                return Ok(());
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(WaitError::Timeout(WatchdogTimeout(timeout)));
            }
            let p = self.progress_count();
            if p != last_progress {
                last_progress = p;
                last_change = now;
            } else if let Some(q) = quiescence {
                if now - last_change >= q {
                    return Err(WaitError::Timeout(WatchdogTimeout(now - start)));
                }
            }
            std::thread::sleep(Duration::from_micros(200));
        }
    }

    pub fn first_fault(&self) -> Option<CorruptContext> {
        self.ranks
            .iter()
            .find_map(|ctl| ctl.fault.lock().unwrap().clone())
    }

    /// Push the exiting entry everywhere and join all service threads.
    pub fn close(&mut self) {
        if self.closed {
            return;
        }
        self.closed = true;
        if !self.abort.load(Ordering::Acquire) {
            for ctl in &self.ranks {
                loop {
                    match ctl.shared.sq.push(Sqe::exiting(0)) {
                        Ok(_) | Err(SubmitError::SubmitAfterExit) => break,
                        Err(_) => std::thread::yield_now(),
                    }
                }
            }
        }
        for ctl in &mut self.ranks {
            if let Some(h) = ctl.supervisor.take() {
                h.join().expect("supervisor panicked");
            }
            ctl.finished.store(true, Ordering::Release);
        }
        for ctl in &mut self.ranks {
            if let Some(h) = ctl.poller_thread.take() {
                h.join().expect("poller panicked");
            }
        }
    }

    /// Teardown for runs declared dead by the watchdog.
    pub fn abort_and_close(&mut self) {
        self.abort.store(true, Ordering::Release);
        self.close();
    }
}

impl Drop for World {
    fn drop(&mut self) {
        // A deadlocked baseline world cannot drain; abort rather than hang.
        if !self.closed {
            self.abort_and_close();
        }
    }
}

fn spawn_supervisor(
    shared: Arc<RankShared>,
    running: Arc<(Mutex<bool>, Condvar)>,
    finished: Arc<AtomicBool>,
    fault: Arc<Mutex<Option<CorruptContext>>>,
) -> JoinHandle<()> {
    std::thread::Builder::new()
        .name(format!("supervisor-{}", shared.rank))
        .spawn(move || loop {
            if shared.abort.load(Ordering::Acquire) {
                finished.store(true, Ordering::Release);
                return;
            }
            let submitted = shared.submitted.load(Ordering::Acquire);
            let completed = shared.completed.load(Ordering::Acquire);
            let work_pending = shared.sq.in_flight() > 0 || completed < submitted;
            if work_pending {
                run_daemon(&shared, &running, &fault);
                continue;
            }
            // Nothing to do. Finished for good once every lane has seen the
            // exit entry with nothing parked.
            if shared.sq.exit_pushed() {
                let all_exited = shared.lane_states.iter().all(|ls| {
                    ls.lock()
                        .unwrap()
                        .as_ref()
                        .is_some_and(|st| st.got_exit && st.saved.is_empty())
                });
                if all_exited && shared.sq.in_flight() == 0 {
                    finished.store(true, Ordering::Release);
                    return;
                }
                // Exit entry pushed but not yet consumed by every lane.
                if shared.sq.in_flight() > 0 {
                    run_daemon(&shared, &running, &fault);
                    continue;
                }
            }
            std::thread::sleep(Duration::from_micros(100));
        })
        .expect("spawn supervisor")
}

/// Launch all lanes jointly and wait for them; exactly one daemon instance
/// per rank because only the supervisor thread calls this.
fn run_daemon(
    shared: &Arc<RankShared>,
    running: &Arc<(Mutex<bool>, Condvar)>,
    fault: &Arc<Mutex<Option<CorruptContext>>>,
) {
    {
        let (lock, cvar) = &**running;
        *lock.lock().unwrap() = true;
        cvar.notify_all();
    }
    let handles: Vec<JoinHandle<()>> = (0..shared.cfg.lanes)
        .map(|lane| {
            let shared = Arc::clone(shared);
            let fault = Arc::clone(fault);
            std::thread::Builder::new()
                .name(format!("lane-{}-{}", shared.rank, lane))
                .spawn(move || {
                    let mut state = shared.lane_states[lane as usize]
                        .lock()
                        .unwrap()
                        .take()
                        .expect("lane state free while daemon down");
                    let result = run_lane(&shared, lane, &mut state);
                    *shared.lane_states[lane as usize].lock().unwrap() = Some(state);
                    if let Err(e) = result {
                        fault.lock().unwrap().get_or_insert(e);
                        shared.abort.store(true, Ordering::Release);
                    }
                })
                .expect("spawn lane")
        })
        .collect();
    for h in handles {
        h.join().expect("lane panicked");
    }
    let (lock, cvar) = &**running;
    *lock.lock().unwrap() = false;
    cvar.notify_all();
}

fn spawn_poller(
    poller: Arc<Poller>,
    shared: Arc<RankShared>,
    finished: Arc<AtomicBool>,
) -> JoinHandle<()> {
    std::thread::Builder::new()
        .name(format!("poller-{}", shared.rank))
        .spawn(move || loop {
            let n = poller.poll_and_dispatch();
            if finished.load(Ordering::Acquire) || shared.abort.load(Ordering::Acquire) {
                // Final drain so no lane stays blocked on a full CQ.
                poller.poll_and_dispatch();
                return;
            }
            if n == 0 {
                std::thread::sleep(Duration::from_micros(50));
            }
        })
        .expect("spawn poller")
}
