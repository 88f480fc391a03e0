//! Acceptance suite: one pass/fail line per criterion, nonzero exit on any
//! failure. Each criterion is an independent, seeded, end-to-end check of
//! the runtime's core guarantees.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{ensure, Context, Result};
use ccl_core::buffer::SharedBuffer;
use ccl_core::config::{Config, CqImpl, Mode};
use ccl_core::queues::make_cq;
use ccl_core::registry::{CollectiveKind, ElemKind, ReduceFn};
use ccl_core::runtime::World;
use ccl_core::stickiness::SpinPolicy;
use ccl_core::values::i32s_to_bytes;
use ccl_harness::output::median;
use ccl_harness::scenario::{
    audit_connectors, run_depletion, run_misorder, run_syncop, run_trace, Submission,
};
use ccl_harness::ScenarioSpec;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WAIT: Duration = Duration::from_secs(60);

const KINDS: [CollectiveKind; 5] = [
    CollectiveKind::AllReduce,
    CollectiveKind::AllGather,
    CollectiveKind::ReduceScatter,
    CollectiveKind::Broadcast,
    CollectiveKind::Reduce,
];

/// Run one collective on a fresh registration of `world` and oracle-check it.
fn run_checked(
    world: &World,
    kind: CollectiveKind,
    reduce_fn: Option<ReduceFn>,
    root: Option<u32>,
    elem_count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let id = world
        .register(kind, world.cfg.lanes, reduce_fn, root, ElemKind::Int32)
        .context("register")?;
    let sub = Submission::prepare(
        world,
        id,
        kind,
        reduce_fn,
        root,
        world.cfg.lanes,
        elem_count,
        rng,
    );
    sub.submit_all(world)?;
    world
        .wait_all(WAIT, None)
        .with_context(|| format!("{kind:?} n={} count={elem_count}", world.cfg.nranks))?;
    sub.verify(world.cfg.chunk_elems())
}

fn reduce_fns(kind: CollectiveKind) -> Vec<Option<ReduceFn>> {
    if kind.is_reducing() {
        ReduceFn::ALL.iter().copied().map(Some).collect()
    } else {
        vec![None]
    }
}

/// Criterion 1: every collective kind, bit-equal to the oracle over the full
/// size/rank/reduce-function matrix, inside the time budget.
fn oracle_matrix() -> Result<String> {
    let t0 = Instant::now();
    let mut runs = 0u32;
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE);
    for nranks in [2u32, 3, 4, 8] {
        for kind in KINDS {
            let root = kind.is_rooted().then_some(nranks - 1);
            for reduce_fn in reduce_fns(kind) {
                let mut world = World::new(Config {
                    nranks,
                    events_enabled: false,
                    ..Config::default()
                });
                for elem_count in [1usize, 7, 256, 1000, 65536] {
                    run_checked(&world, kind, reduce_fn, root, elem_count, &mut rng)?;
                    runs += 1;
                }
                audit_connectors(&world)?;
                world.close();
            }
        }
    }
    let elapsed = t0.elapsed();
    ensure!(
        elapsed < Duration::from_secs(120),
        "matrix took {elapsed:?}, budget is 120s"
    );
    Ok(format!("{runs} runs, {elapsed:.1?}"))
}

/// Criterion 2: randomized spin budgets (including budget 1) never change the
/// results, and the per-step transfer audit (enforced at every completion)
/// never trips.
fn preemption_exactness() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xBDE7);
    let mut runs = 0u32;
    for kind in KINDS {
        let root = kind.is_rooted().then_some(3);
        for reduce_fn in reduce_fns(kind) {
            for elem_count in [1usize, 7, 256, 1000, 65536] {
                let mut budgets = vec![1u64, rng.gen_range(2..64), rng.gen_range(64..8192)];
                budgets.dedup();
                for budget in budgets {
                    let mut world = World::new(Config {
                        nranks: 4,
                        spin: SpinPolicy::constant(budget),
                        events_enabled: false,
                        ..Config::default()
                    });
                    run_checked(&world, kind, reduce_fn, root, elem_count, &mut rng)
                        .with_context(|| format!("budget {budget}"))?;
                    audit_connectors(&world)?;
                    world.close();
                    runs += 1;
                }
            }
        }
    }
    Ok(format!("{runs} randomized-budget runs"))
}

/// Criterion 3: adversarial submission orders complete under the preemptive
/// daemon and deadlock the non-preemptive baseline.
fn misorder_scenario() -> Result<String> {
    let spec = ScenarioSpec {
        ranks: 4,
        collectives: 8,
        minbytes: 256,
        maxbytes: 64 * 1024,
        iters: 200,
        watchdog: Duration::from_secs(60),
        ..ScenarioSpec::default()
    };
    let t0 = Instant::now();
    let occl = run_misorder(&spec)?;
    ensure!(occl.passed, "preemptive run failed: {}", occl.detail);
    ensure!(
        t0.elapsed() < Duration::from_secs(60),
        "preemptive run exceeded the watchdog"
    );
    let baseline = run_misorder(&ScenarioSpec {
        mode: Mode::Baseline,
        stream_slots: 1,
        watchdog: Duration::from_secs(20),
        ..spec
    })?;
    ensure!(
        !baseline.passed,
        "baseline unexpectedly completed: {}",
        baseline.detail
    );
    Ok(format!(
        "200 iterations in {:.1}s with {} preemptions; baseline deadlocked ({})",
        occl.elapsed_secs, occl.preemptions, baseline.detail
    ))
}

/// Criterion 4: stream-slot depletion and submit/sync/submit interleaving —
/// the preemptive mode passes, the baseline deadlocks, controls pass.
fn depletion_and_syncop() -> Result<String> {
    let dep = ScenarioSpec {
        ranks: 2,
        stream_slots: 2,
        watchdog: Duration::from_secs(20),
        ..ScenarioSpec::default()
    };
    let baseline = run_depletion(&ScenarioSpec {
        mode: Mode::Baseline,
        ..dep.clone()
    })?;
    ensure!(
        !baseline.passed,
        "baseline depletion completed: {}",
        baseline.detail
    );
    let occl = run_depletion(&dep)?;
    ensure!(occl.passed, "preemptive depletion failed: {}", occl.detail);
    let control = run_depletion(&ScenarioSpec {
        mode: Mode::Baseline,
        stream_slots: 8,
        ..dep.clone()
    })?;
    ensure!(control.passed, "8-slot control failed: {}", control.detail);

    let sync = ScenarioSpec {
        ranks: 2,
        watchdog: Duration::from_secs(20),
        ..ScenarioSpec::default()
    };
    let occl_sync = run_syncop(&sync)?;
    ensure!(
        occl_sync.passed,
        "preemptive syncop failed: {}",
        occl_sync.detail
    );
    let base_sync = run_syncop(&ScenarioSpec {
        mode: Mode::Baseline,
        watchdog: Duration::from_secs(8),
        ..sync.clone()
    })?;
    ensure!(
        !base_sync.passed,
        "baseline syncop completed: {}",
        base_sync.detail
    );
    for mode in [Mode::Occl, Mode::Baseline] {
        let single = run_syncop(&ScenarioSpec {
            ranks: 1,
            mode,
            watchdog: Duration::from_secs(20),
            ..ScenarioSpec::default()
        })?;
        ensure!(single.passed, "single-rank syncop failed in {mode:?}");
    }
    Ok("depletion S=2/S=8 and syncop behave per mode".into())
}

/// Criterion 5: with an aggressive quit horizon and randomly delayed peers,
/// every submission completes exactly once after event-driven restarts.
fn quit_restart_exactly_once() -> Result<String> {
    let iters: u64 = 500; // two ranks -> 1000 submissions
    let mut world = World::new(Config {
        nranks: 2,
        stall_rounds_limit: 8,
        idle_rounds_limit: 16,
        events_enabled: false,
        ..Config::default()
    });
    let id = world
        .register(
            CollectiveKind::AllReduce,
            1,
            Some(ReduceFn::Sum),
            None,
            ElemKind::Int32,
        )
        .context("register")?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x0DD5);
    let fired = Arc::new(AtomicU64::new(0));
    for i in 0..iters {
        let elems = rng.gen_range(1..2048);
        let inputs: Vec<Vec<u8>> = (0..2)
            .map(|_| {
                i32s_to_bytes(
                    &(0..elems)
                        .map(|_| rng.gen_range(-100..100))
                        .collect::<Vec<i32>>(),
                )
            })
            .collect();
        let recvs: Vec<SharedBuffer> = (0..2).map(|_| SharedBuffer::zeroed(elems * 4)).collect();
        for r in 0..2u32 {
            if r == 1 {
                // Delay the peer; every 20th iteration well past the quit
                // horizon so restarts demonstrably happen.
                let delay = if i % 20 == 0 {
                    Duration::from_millis(rng.gen_range(3..8))
                } else {
                    Duration::from_micros(rng.gen_range(0..500))
                };
                std::thread::sleep(delay);
            }
            let fired = Arc::clone(&fired);
            world
                .submit(
                    r,
                    id,
                    SharedBuffer::from_vec(inputs[r as usize].clone()),
                    recvs[r as usize].clone(),
                    elems,
                    Box::new(move || {
                        fired.fetch_add(1, Ordering::SeqCst);
                    }),
                )
                .context("submit")?;
        }
        world
            .wait_all(WAIT, None)
            .with_context(|| format!("iteration {i}"))?;
    }
    let callbacks = fired.load(Ordering::SeqCst);
    ensure!(
        callbacks == 2 * iters,
        "expected {} callbacks, got {callbacks}",
        2 * iters
    );
    let mut quits = 0;
    for r in 0..2 {
        let completed = world.rank(r).completed.load(Ordering::SeqCst);
        ensure!(
            completed == iters,
            "rank {r} completed {completed}, want {iters}"
        );
        quits += world.rank(r).stats.quits.load(Ordering::Relaxed);
    }
    ensure!(
        quits >= 1,
        "no voluntary quit ever happened; scenario too tame"
    );
    audit_connectors(&world)?;
    world.close();
    Ok(format!(
        "{} submissions, {quits} voluntary quits",
        2 * iters
    ))
}

/// Criterion 6: the three completion-queue variants deliver identical id
/// multisets with zero loss or duplication under concurrent producers.
fn cq_equivalence() -> Result<String> {
    const TOTAL: u32 = 10_000;
    const PRODUCERS: u32 = 4;
    for seed in 0..10u64 {
        let mut per_impl: Vec<Vec<u32>> = Vec::new();
        for which in [CqImpl::Vanilla, CqImpl::Packed, CqImpl::Slot] {
            let cq = make_cq(which, 64, TOTAL as usize);
            let mut got: Vec<u32> = Vec::with_capacity(TOTAL as usize);
            std::thread::scope(|s| {
                for p in 0..PRODUCERS {
                    let cq = Arc::clone(&cq);
                    let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + p as u64);
                    s.spawn(move || {
                        let span = TOTAL / PRODUCERS;
                        let mut ids: Vec<u32> = (p * span..(p + 1) * span).collect();
                        ids.shuffle(&mut rng);
                        for id in ids {
                            cq.write(id);
                        }
                    });
                }
                while got.len() < TOTAL as usize {
                    match cq.try_read() {
                        Some(id) => got.push(id),
                        None => std::thread::yield_now(),
                    }
                }
            });
            got.sort_unstable();
            per_impl.push(got);
        }
        for (ix, got) in per_impl.iter().enumerate() {
            ensure!(
                *got == per_impl[0],
                "seed {seed}: impl {ix} delivered a different multiset"
            );
            ensure!(
                got.iter().copied().eq(0..TOTAL),
                "seed {seed}: impl {ix} lost or duplicated ids"
            );
        }
    }
    Ok(format!("{TOTAL} completions x 3 variants x 10 seeds"))
}

/// Criterion 7: stickiness (conditional fetch + position/boost thresholds)
/// yields strictly lower median preemption counts and max queue lengths than
/// the pre-stickiness policy (fetch every round, short constant spin).
fn stickiness_effect() -> Result<String> {
    let base = ScenarioSpec {
        ranks: 4,
        collectives: 161,
        minbytes: 16 * 1024,
        delay_rank: Some(2),
        delay: Duration::from_millis(200),
        watchdog: Duration::from_secs(60),
        ..ScenarioSpec::default()
    };
    let mut meds = (Vec::new(), Vec::new());
    let mut maxqs = (Vec::new(), Vec::new());
    for seed in 0..10u64 {
        let sticky = run_trace(&ScenarioSpec {
            seed,
            ..base.clone()
        })?;
        let presticky = run_trace(&ScenarioSpec {
            seed,
            spin: SpinPolicy::constant(64),
            eager_fetch: true,
            ..base.clone()
        })?;
        meds.0.push(sticky.median_preemptions as u64);
        meds.1.push(presticky.median_preemptions as u64);
        maxqs.0.push(sticky.max_queue_len_overall());
        maxqs.1.push(presticky.max_queue_len_overall());
    }
    let (med_s, med_p) = (median(&meds.0), median(&meds.1));
    let (q_s, q_p) = (median(&maxqs.0), median(&maxqs.1));
    ensure!(
        med_s < med_p,
        "median preemptions not lower: sticky {med_s} vs pre-sticky {med_p}"
    );
    ensure!(
        q_s < q_p,
        "max queue length not lower: sticky {q_s} vs pre-sticky {q_p}"
    );
    Ok(format!(
        "10 paired seeds: median preemptions {med_s} vs {med_p}, max queue {q_s} vs {q_p}"
    ))
}

/// Criterion 8: lossless FIFO connector delivery under randomized preemption
/// schedules — every run above already audits; this adds adversarial orders
/// with random tiny budgets.
fn connector_audit_random_schedules() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0DE);
    let mut audited = 0usize;
    for _ in 0..10 {
        let budget = rng.gen_range(1..512);
        let spec = ScenarioSpec {
            ranks: 4,
            collectives: 6,
            minbytes: 256,
            maxbytes: 32 * 1024,
            iters: 3,
            spin: SpinPolicy::constant(budget),
            seed: rng.gen(),
            watchdog: Duration::from_secs(30),
            ..ScenarioSpec::default()
        };
        // run_misorder audits every connector after the run.
        let outcome = run_misorder(&spec)?;
        ensure!(outcome.passed, "budget {budget}: {}", outcome.detail);
        audited += 1;
    }
    Ok(format!(
        "{audited} randomized-budget adversarial runs audited"
    ))
}

fn main() {
    let criteria: Vec<(&str, fn() -> Result<String>)> = vec![
        ("oracle equivalence matrix", oracle_matrix),
        (
            "preemption exactness under randomized budgets",
            preemption_exactness,
        ),
        ("misorder deadlock prevention", misorder_scenario),
        ("depletion and syncop scenarios", depletion_and_syncop),
        (
            "quit/restart exactly-once liveness",
            quit_restart_exactly_once,
        ),
        ("completion-queue variant equivalence", cq_equivalence),
        ("stickiness scheduling effect", stickiness_effect),
        (
            "connector audit under random schedules",
            connector_audit_random_schedules,
        ),
    ];
    let mut failures = 0;
    for (ix, (name, f)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        match f() {
            Ok(note) => println!(
                "criterion {} ({name}): PASS — {note} [{:.1?}]",
                ix + 1,
                t0.elapsed()
            ),
            Err(e) => {
                failures += 1;
                println!("criterion {} ({name}): FAIL — {e:#}", ix + 1);
            }
        }
    }
    if failures > 0 {
        println!("{failures} criterion(s) failed");
        std::process::exit(1);
    }
    println!("all {} criteria passed", criteria.len());
}
