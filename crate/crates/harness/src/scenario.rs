//! Scenario runners: bandwidth/latency sweeps, the three deadlock
//! reproductions (misorder, depletion, syncop), and the scheduling trace.
//!
//! Every scenario validates payloads against the single-threaded reference
//! oracle — none passes on liveness alone — and every completed world is
//! audited for lossless connector delivery.

use std::sync::atomic::Ordering;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use ccl_core::buffer::SharedBuffer;
use ccl_core::config::Mode;
use ccl_core::error::WatchdogTimeout;
use ccl_core::registry::{CollectiveId, CollectiveKind, CollectiveMeta, ElemKind, ReduceFn};
use ccl_core::ring::{reference_oracle, rs_output_elems};
use ccl_core::runtime::World;
use ccl_core::values::i32s_to_bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::output::{median, BenchRow, ScenarioOutcome, TraceReport};
use crate::spec::ScenarioSpec;

/// One prepared instance of a collective: fresh random inputs plus zeroed,
/// correctly sized receive buffers for every rank.
pub struct Submission {
    pub id: CollectiveId,
    meta0: CollectiveMeta,
    pub elem_count: usize,
    inputs: Vec<Vec<u8>>,
    recvs: Vec<SharedBuffer>,
}

fn recv_len_bytes(meta: &CollectiveMeta, elem_count: usize, chunk_elems: usize) -> usize {
    let esize = meta.elem_kind.size();
    match meta.kind {
        CollectiveKind::AllGather => meta.nranks as usize * elem_count * esize,
        CollectiveKind::ReduceScatter => rs_output_elems(meta, elem_count, chunk_elems) * esize,
        _ => elem_count * esize,
    }
}

impl Submission {
    pub fn prepare(
        world: &World,
        id: CollectiveId,
        kind: CollectiveKind,
        reduce_fn: Option<ReduceFn>,
        root: Option<u32>,
        lanes_used: u32,
        elem_count: usize,
        rng: &mut ChaCha8Rng,
    ) -> Submission {
        let nranks = world.cfg.nranks;
        let meta0 = CollectiveMeta {
            kind,
            nranks,
            rank: 0,
            root,
            lanes_used,
            lane_width: 32,
            reduce_fn,
            elem_kind: ElemKind::Int32,
        };
        let inputs: Vec<Vec<u8>> = (0..nranks)
            .map(|_| {
                i32s_to_bytes(
                    &(0..elem_count)
                        .map(|_| rng.gen_range(-1000..1000))
                        .collect::<Vec<i32>>(),
                )
            })
            .collect();
        let recvs = (0..nranks)
            .map(|r| {
                let meta_r = CollectiveMeta {
                    rank: r,
                    ..meta0.clone()
                };
                SharedBuffer::zeroed(recv_len_bytes(&meta_r, elem_count, world.cfg.chunk_elems()))
            })
            .collect();
        Submission {
            id,
            meta0,
            elem_count,
            inputs,
            recvs,
        }
    }

    pub fn submit_rank(&self, world: &World, rank: u32) -> Result<()> {
        world
            .submit(
                rank,
                self.id,
                SharedBuffer::from_vec(self.inputs[rank as usize].clone()),
                self.recvs[rank as usize].clone(),
                self.elem_count,
                Box::new(|| {}),
            )
            .with_context(|| format!("submit collective {} on rank {rank}", self.id))
    }

    pub fn submit_all(&self, world: &World) -> Result<()> {
        for r in 0..world.cfg.nranks {
            self.submit_rank(world, r)?;
        }
        Ok(())
    }

    /// Compare every rank's receive buffer against the reference oracle.
    pub fn verify(&self, chunk_elems: usize) -> Result<()> {
        let expect = reference_oracle(&self.meta0, chunk_elems, &self.inputs);
        for (r, want) in expect.iter().enumerate() {
            let got = self.recvs[r].snapshot();
            if want.is_empty() {
                // Non-root of a rooted reduce: buffer must stay untouched.
                if let Some(ix) = got.iter().position(|&b| b != 0) {
                    bail!(
                        "collective {} rank {r}: untouched buffer written at byte {ix}",
                        self.id
                    );
                }
                continue;
            }
            if got != *want {
                let ix = got
                    .iter()
                    .zip(want.iter())
                    .position(|(a, b)| a != b)
                    .unwrap_or(got.len().min(want.len()));
                bail!(
                    "collective {} rank {r}: oracle mismatch at byte {ix} \
                     (got len {}, want len {}, got[{ix}..]={:?}, want[{ix}..]={:?})",
                    self.id,
                    got.len(),
                    want.len(),
                    &got[ix.min(got.len())..got.len().min(ix + 8)],
                    &want[ix.min(want.len())..want.len().min(ix + 8)],
                );
            }
        }
        Ok(())
    }
}

/// Lossless-delivery audit over every connector the world ever wired.
pub fn audit_connectors(world: &World) -> Result<()> {
    for audit in world.connector_audits() {
        if audit.committed != audit.popped {
            bail!("connector audit lost slices: {audit:?}");
        }
        if audit.max_occupancy > audit.capacity as u64 {
            bail!("connector audit occupancy over capacity: {audit:?}");
        }
    }
    Ok(())
}

fn preemptions_total(world: &World) -> u64 {
    (0..world.cfg.nranks)
        .map(|r| {
            world
                .rank(r)
                .stats
                .preemptions_total
                .load(Ordering::Relaxed)
        })
        .sum()
}

fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Occl => "occl",
        Mode::Baseline => "baseline",
    }
}

/// Bandwidth/latency sweep: for each size in the sweep, submit the collective
/// in identical order on every rank, average over iterations, and validate
/// every result against the oracle.
pub fn run_bench(spec: &ScenarioSpec) -> Result<Vec<BenchRow>> {
    let mut world = World::new(spec.config());
    let reduce_fn = spec.kind.is_reducing().then_some(spec.op);
    let root = spec.kind.is_rooted().then_some(0);
    let id = world
        .register(spec.kind, spec.lanes, reduce_fn, root, ElemKind::Int32)
        .context("register bench collective")?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let esize = ElemKind::Int32.size();
    let mut rows = Vec::new();
    for bytes in spec.sizes() {
        let elem_count = (bytes / esize).max(1);
        let pre_before = preemptions_total(&world);
        let mut total = Duration::ZERO;
        for _ in 0..spec.iters.max(1) {
            let sub = Submission::prepare(
                &world, id, spec.kind, reduce_fn, root, spec.lanes, elem_count, &mut rng,
            );
            let t0 = Instant::now();
            sub.submit_all(&world)?;
            world
                .wait_all(spec.watchdog, None)
                .with_context(|| format!("bench point {bytes} B"))?;
            total += t0.elapsed();
            sub.verify(world.cfg.chunk_elems())?;
        }
        let lat = total.as_secs_f64() / spec.iters.max(1) as f64;
        rows.push(BenchRow {
            kind: format!("{:?}", spec.kind).to_lowercase(),
            nranks: spec.ranks,
            bytes,
            lat,
            algbw: bytes as f64 / lat,
            preemptions: preemptions_total(&world) - pre_before,
        });
    }
    audit_connectors(&world)?;
    world.close();
    Ok(rows)
}

/// Adversarial submission orders: K collectives per iteration, submitted in
/// ascending id order on even ranks and descending order on odd ranks.
/// Passes iff all iterations complete within the watchdog with oracle-valid
/// results; a quiescent world is declared deadlocked.
pub fn run_misorder(spec: &ScenarioSpec) -> Result<ScenarioOutcome> {
    let start = Instant::now();
    let deadline = start + spec.watchdog;
    let mut world = World::new(spec.config());
    let reduce_fn = spec.kind.is_reducing().then_some(spec.op);
    let root = spec.kind.is_rooted().then_some(0);
    let sizes = spec.sizes();
    let esize = ElemKind::Int32.size();
    let k = spec.collectives.max(2);
    let mut ids = Vec::new();
    for i in 0..k {
        let id = world
            .register(spec.kind, spec.lanes, reduce_fn, root, ElemKind::Int32)
            .context("register misorder collective")?;
        ids.push((id, (sizes[i % sizes.len()] / esize).max(1)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for iter in 0..spec.iters.max(1) {
        let subs: Vec<Submission> = ids
            .iter()
            .map(|&(id, elems)| {
                Submission::prepare(
                    &world, id, spec.kind, reduce_fn, root, spec.lanes, elems, &mut rng,
                )
            })
            .collect();
        for r in 0..spec.ranks {
            let order: Vec<usize> = if r % 2 == 0 {
                (0..k).collect()
            } else {
                (0..k).rev().collect()
            };
            for i in order {
                subs[i].submit_rank(&world, r)?;
            }
        }
        let remaining = deadline.saturating_duration_since(Instant::now());
        if remaining.is_zero() {
            world.abort_and_close();
            return Ok(ScenarioOutcome {
                scenario: "misorder".into(),
                mode: mode_name(spec.mode).into(),
                passed: false,
                detail: format!("watchdog expired before iteration {iter}"),
                preemptions: 0,
                elapsed_secs: start.elapsed().as_secs_f64(),
            });
        }
        if let Err(e) = world.wait_all(remaining, Some(spec.quiescence)) {
            let preemptions = preemptions_total(&world);
            world.abort_and_close();
            return Ok(ScenarioOutcome {
                scenario: "misorder".into(),
                mode: mode_name(spec.mode).into(),
                passed: false,
                detail: format!("iteration {iter}: {e}"),
                preemptions,
                elapsed_secs: start.elapsed().as_secs_f64(),
            });
        }
        for sub in &subs {
            sub.verify(world.cfg.chunk_elems())?;
        }
    }
    audit_connectors(&world)?;
    let preemptions = preemptions_total(&world);
    world.close();
    Ok(ScenarioOutcome {
        scenario: "misorder".into(),
        mode: mode_name(spec.mode).into(),
        passed: true,
        detail: format!("{} iterations completed", spec.iters.max(1)),
        preemptions,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

/// Resource depletion: three collectives, submitted A,B,C on even ranks and
/// C,B,A on odd ranks. With two baseline stream slots A and C end up behind
/// each other on both sides and circular-wait; the preemptive mode and an
/// under-subscribed slot count both pass.
pub fn run_depletion(spec: &ScenarioSpec) -> Result<ScenarioOutcome> {
    let start = Instant::now();
    let mut world = World::new(spec.config());
    let reduce_fn = spec.kind.is_reducing().then_some(spec.op);
    let root = spec.kind.is_rooted().then_some(0);
    // Big enough that no collective fits inside the connector rings.
    let elem_count = (spec.maxbytes.max(16 * 1024) / ElemKind::Int32.size()).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let subs: Vec<Submission> = (0..3)
        .map(|_| {
            let id = world
                .register(spec.kind, spec.lanes, reduce_fn, root, ElemKind::Int32)
                .context("register depletion collective")?;
            Ok(Submission::prepare(
                &world, id, spec.kind, reduce_fn, root, spec.lanes, elem_count, &mut rng,
            ))
        })
        .collect::<Result<_>>()?;
    for r in 0..spec.ranks {
        let order: Vec<usize> = if r % 2 == 0 {
            vec![0, 1, 2]
        } else {
            vec![2, 1, 0]
        };
        for i in order {
            subs[i].submit_rank(&world, r)?;
        }
    }
    if let Err(e) = world.wait_all(spec.watchdog, Some(spec.quiescence)) {
        let preemptions = preemptions_total(&world);
        world.abort_and_close();
        return Ok(ScenarioOutcome {
            scenario: "depletion".into(),
            mode: mode_name(spec.mode).into(),
            passed: false,
            detail: e.to_string(),
            preemptions,
            elapsed_secs: start.elapsed().as_secs_f64(),
        });
    }
    for sub in &subs {
        sub.verify(world.cfg.chunk_elems())?;
    }
    audit_connectors(&world)?;
    let preemptions = preemptions_total(&world);
    world.close();
    Ok(ScenarioOutcome {
        scenario: "depletion".into(),
        mode: mode_name(spec.mode).into(),
        passed: true,
        detail: format!("3 collectives with {} stream slots", spec.stream_slots),
        preemptions,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

/// Synchronization-operation scenario: rank 0 submits A, synchronizes, then
/// submits B while rank 1 does the reverse. The preemptive daemon quits at
/// the sync point and resumes later; a run-to-completion daemon blocks the
/// sync forever. With one rank there is no circular wait and both modes pass.
pub fn run_syncop(spec: &ScenarioSpec) -> Result<ScenarioOutcome> {
    let start = Instant::now();
    if spec.ranks > 2 {
        bail!("syncop is defined for --ranks 1 or 2");
    }
    let world = World::new(spec.config());
    let reduce_fn = spec.kind.is_reducing().then_some(spec.op);
    let root = spec.kind.is_rooted().then_some(0);
    let elem_count = (spec.maxbytes.max(16 * 1024) / ElemKind::Int32.size()).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let subs: Vec<Submission> = (0..2)
        .map(|_| {
            let id = world
                .register(spec.kind, spec.lanes, reduce_fn, root, ElemKind::Int32)
                .context("register syncop collective")?;
            Ok(Submission::prepare(
                &world, id, spec.kind, reduce_fn, root, spec.lanes, elem_count, &mut rng,
            ))
        })
        .collect::<Result<_>>()?;

    let sync_results: Vec<Result<(), WatchdogTimeout>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..spec.ranks)
            .map(|r| {
                let world = &world;
                let subs = &subs;
                s.spawn(move || -> Result<(), WatchdogTimeout> {
                    let (first, second) = if r % 2 == 0 { (0, 1) } else { (1, 0) };
                    subs[first].submit_rank(world, r).expect("submit");
                    world.device_synchronize(r, spec.watchdog)?;
                    subs[second].submit_rank(world, r).expect("submit");
                    Ok(())
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("host thread"))
            .collect()
    });

    let mut world = world;
    if let Some(e) = sync_results.into_iter().find_map(|r| r.err()) {
        let preemptions = preemptions_total(&world);
        world.abort_and_close();
        return Ok(ScenarioOutcome {
            scenario: "syncop".into(),
            mode: mode_name(spec.mode).into(),
            passed: false,
            detail: format!("device_synchronize stuck: {e}"),
            preemptions,
            elapsed_secs: start.elapsed().as_secs_f64(),
        });
    }
    let remaining = spec
        .watchdog
        .saturating_sub(start.elapsed())
        .max(Duration::from_millis(1));
    if let Err(e) = world.wait_all(remaining, Some(spec.quiescence)) {
        let preemptions = preemptions_total(&world);
        world.abort_and_close();
        return Ok(ScenarioOutcome {
            scenario: "syncop".into(),
            mode: mode_name(spec.mode).into(),
            passed: false,
            detail: e.to_string(),
            preemptions,
            elapsed_secs: start.elapsed().as_secs_f64(),
        });
    }
    for sub in &subs {
        sub.verify(world.cfg.chunk_elems())?;
    }
    audit_connectors(&world)?;
    let preemptions = preemptions_total(&world);
    world.close();
    Ok(ScenarioOutcome {
        scenario: "syncop".into(),
        mode: mode_name(spec.mode).into(),
        passed: true,
        detail: "both syncs returned, both collectives completed".into(),
        preemptions,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

/// Scheduling trace: `collectives` all-reduces submitted in the same order on
/// every rank, with one rank's submissions delayed. Emits per-collective
/// preemption counts and queue-length-at-fetch series per rank.
pub fn run_trace(spec: &ScenarioSpec) -> Result<TraceReport> {
    let world = World::new(spec.config());
    let reduce_fn = spec.kind.is_reducing().then_some(spec.op);
    let root = spec.kind.is_rooted().then_some(0);
    let elem_count = (spec.minbytes.max(256) / ElemKind::Int32.size()).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.collectives.max(1);
    let subs: Vec<Submission> = (0..n)
        .map(|_| {
            let id = world
                .register(spec.kind, spec.lanes, reduce_fn, root, ElemKind::Int32)
                .context("register trace collective")?;
            Ok(Submission::prepare(
                &world, id, spec.kind, reduce_fn, root, spec.lanes, elem_count, &mut rng,
            ))
        })
        .collect::<Result<_>>()?;

    std::thread::scope(|s| {
        for r in 0..spec.ranks {
            let world = &world;
            let subs = &subs;
            s.spawn(move || {
                if spec.delay_rank == Some(r) {
                    std::thread::sleep(spec.delay);
                }
                for sub in subs {
                    sub.submit_rank(world, r).expect("submit");
                }
            });
        }
    });
    let mut world = world;
    if let Err(e) = world.wait_all(spec.watchdog, None) {
        world.abort_and_close();
        return Err(e).context("trace run");
    }
    for sub in &subs {
        sub.verify(world.cfg.chunk_elems())?;
    }
    audit_connectors(&world)?;

    let preemptions_per_collective: Vec<(u32, u64)> = subs
        .iter()
        .map(|sub| {
            let total = (0..spec.ranks)
                .map(|r| world.rank(r).stats.preemptions_of(sub.id))
                .sum();
            (sub.id, total)
        })
        .collect();
    let queue_series: Vec<Vec<usize>> = (0..spec.ranks)
        .map(|r| {
            world
                .rank(r)
                .stats
                .queue_len_at_fetch
                .lock()
                .unwrap()
                .clone()
        })
        .collect();
    let max_queue_len: Vec<u64> = (0..spec.ranks)
        .map(|r| world.rank(r).stats.max_queue_len.load(Ordering::Relaxed))
        .collect();
    let counts: Vec<u64> = preemptions_per_collective.iter().map(|&(_, c)| c).collect();
    let mut events = Vec::new();
    world.events().write_jsonl(&mut events)?;
    world.close();
    Ok(TraceReport {
        preemptions_per_collective,
        queue_series,
        max_queue_len,
        median_preemptions: median(&counts),
        events_jsonl: String::from_utf8(events).expect("jsonl is utf-8"),
    })
}
