//! End-to-end runtime checks against the single-threaded reference oracle.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use ccl_core::buffer::SharedBuffer;
use ccl_core::config::Config;
use ccl_core::registry::{CollectiveKind, CollectiveMeta, ElemKind, ReduceFn};
use ccl_core::ring::{reference_oracle, rs_output_elems};
use ccl_core::runtime::World;
use ccl_core::values::i32s_to_bytes;
use rand::{Rng, SeedableRng};

const WAIT: Duration = Duration::from_secs(30);

fn seeded_inputs(nranks: u32, elem_count: usize, seed: u64) -> Vec<Vec<u8>> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..nranks)
        .map(|_| {
            i32s_to_bytes(
                &(0..elem_count)
                    .map(|_| rng.gen_range(-1000..1000))
                    .collect::<Vec<i32>>(),
            )
        })
        .collect()
}

fn recv_len_bytes(
    kind: CollectiveKind,
    meta: &CollectiveMeta,
    elem_count: usize,
    cfg: &Config,
) -> usize {
    let esize = meta.elem_kind.size();
    match kind {
        CollectiveKind::AllGather => meta.nranks as usize * elem_count * esize,
        CollectiveKind::ReduceScatter => {
            rs_output_elems(meta, elem_count, cfg.chunk_elems()) * esize
        }
        _ => elem_count * esize,
    }
}

/// Run `kind` once on a fresh world and compare all recv buffers with the
/// oracle. Returns total preemptions across ranks for callers that care.
fn run_once(
    cfg: Config,
    kind: CollectiveKind,
    reduce_fn: Option<ReduceFn>,
    root: Option<u32>,
    elem_count: usize,
    seed: u64,
) -> u64 {
    let nranks = cfg.nranks;
    let lanes_used = cfg.lanes;
    let mut world = World::new(cfg.clone());
    let id = world
        .register(kind, lanes_used, reduce_fn, root, ElemKind::Int32)
        .unwrap();
    let inputs = seeded_inputs(nranks, elem_count, seed);
    let done = Arc::new(AtomicU64::new(0));
    let mut recvs = vec![];
    for r in 0..nranks {
        let meta = CollectiveMeta {
            kind,
            nranks,
            rank: r,
            root,
            lanes_used,
            lane_width: 32,
            reduce_fn,
            elem_kind: ElemKind::Int32,
        };
        let send = SharedBuffer::from_vec(inputs[r as usize].clone());
        let recv = SharedBuffer::zeroed(recv_len_bytes(kind, &meta, elem_count, &world.cfg));
        recvs.push(recv.clone());
        let done = Arc::clone(&done);
        world
            .submit(
                r,
                id,
                send,
                recv,
                elem_count,
                Box::new(move || {
                    done.fetch_add(1, Ordering::SeqCst);
                }),
            )
            .unwrap();
    }
    world.wait_all(WAIT, None).expect("collective finished");
    assert_eq!(done.load(Ordering::SeqCst), nranks as u64);

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
    let expect = reference_oracle(&meta0, world.cfg.chunk_elems(), &inputs);
    for r in 0..nranks as usize {
        let got = recvs[r].snapshot();
        if expect[r].is_empty() {
            // Untouched contract (reduce non-roots): still all zero.
            assert!(got.iter().all(|&b| b == 0), "rank {r} buffer touched");
        } else {
            assert_eq!(
                got, expect[r],
                "{kind:?} n={nranks} count={elem_count} rank {r}"
            );
        }
    }
    let preempts: u64 = (0..nranks)
        .map(|r| {
            world
                .rank(r)
                .stats
                .preemptions_total
                .load(Ordering::Relaxed)
        })
        .sum();
    world.close();
    preempts
}

fn all_kinds() -> Vec<(CollectiveKind, Option<ReduceFn>, Option<u32>)> {
    vec![
        (CollectiveKind::AllReduce, Some(ReduceFn::Sum), None),
        (CollectiveKind::AllGather, None, None),
        (CollectiveKind::ReduceScatter, Some(ReduceFn::Sum), None),
        (CollectiveKind::Broadcast, None, Some(0)),
        (CollectiveKind::Reduce, Some(ReduceFn::Max), None),
    ]
}

#[test]
fn two_rank_allreduce_matches_oracle() {
    let cfg = Config {
        nranks: 2,
        ..Config::default()
    };
    run_once(
        cfg,
        CollectiveKind::AllReduce,
        Some(ReduceFn::Sum),
        None,
        1000,
        1,
    );
}

#[test]
fn all_kinds_small_matrix() {
    for nranks in [2u32, 3, 4] {
        for (kind, f, root) in all_kinds() {
            let root = root.map(|_| nranks - 1); // exercise a non-zero root
            let root = if kind.is_rooted() {
                root.or(Some(nranks - 1))
            } else {
                None
            };
            for elem_count in [1usize, 7, 1000] {
                let cfg = Config {
                    nranks,
                    ..Config::default()
                };
                run_once(cfg, kind, f, root, elem_count, 7 + elem_count as u64);
            }
        }
    }
}

#[test]
fn multi_lane_partitions_agree() {
    for (kind, f, _) in all_kinds() {
        let root = if kind.is_rooted() { Some(1) } else { None };
        let cfg = Config {
            nranks: 3,
            lanes: 2,
            ..Config::default()
        };
        run_once(cfg, kind, f, root, 5000, 99);
    }
}

#[test]
fn single_rank_degenerates_to_copy() {
    for (kind, f, _) in all_kinds() {
        let root = if kind.is_rooted() { Some(0) } else { None };
        let cfg = Config {
            nranks: 1,
            ..Config::default()
        };
        run_once(cfg, kind, f, root, 500, 3);
    }
}

#[test]
fn forced_tiny_thresholds_preempt_but_stay_correct() {
    use ccl_core::stickiness::SpinPolicy;
    let cfg = Config {
        nranks: 2,
        spin: SpinPolicy::constant(4),
        ..Config::default()
    };
    let preempts = run_once(
        cfg,
        CollectiveKind::AllReduce,
        Some(ReduceFn::Sum),
        None,
        4096,
        5,
    );
    assert!(
        preempts >= 1,
        "tiny budgets must force at least one preemption"
    );
}

#[test]
fn repeated_submissions_complete_exactly_once() {
    let cfg = Config {
        nranks: 2,
        ..Config::default()
    };
    let mut world = World::new(cfg);
    let id = world
        .register(
            CollectiveKind::AllReduce,
            1,
            Some(ReduceFn::Sum),
            None,
            ElemKind::Int32,
        )
        .unwrap();
    let fired = Arc::new(AtomicU64::new(0));
    let iters = 50;
    for i in 0..iters {
        let inputs = seeded_inputs(2, 64, i);
        let recvs: Vec<SharedBuffer> = (0..2).map(|_| SharedBuffer::zeroed(64 * 4)).collect();
        for r in 0..2u32 {
            let fired = Arc::clone(&fired);
            world
                .submit(
                    r,
                    id,
                    SharedBuffer::from_vec(inputs[r as usize].clone()),
                    recvs[r as usize].clone(),
                    64,
                    Box::new(move || {
                        fired.fetch_add(1, Ordering::SeqCst);
                    }),
                )
                .unwrap();
        }
        world.wait_all(WAIT, None).unwrap();
    }
    assert_eq!(fired.load(Ordering::SeqCst), 2 * iters);
    for r in 0..2 {
        assert_eq!(world.rank(r).completed.load(Ordering::SeqCst), iters);
    }
    world.close();
}

#[test]
fn duplicate_submission_rejected_while_outstanding() {
    use ccl_core::error::SubmitError;
    let cfg = Config {
        nranks: 2,
        ..Config::default()
    };
    let mut world = World::new(cfg);
    let id = world
        .register(
            CollectiveKind::AllReduce,
            1,
            Some(ReduceFn::Sum),
            None,
            ElemKind::Int32,
        )
        .unwrap();
    // Submit on rank 0 only: it cannot complete, so it stays outstanding.
    let buf = SharedBuffer::from_vec(i32s_to_bytes(&[1; 64]));
    world
        .submit(
            0,
            id,
            buf.clone(),
            SharedBuffer::zeroed(256),
            64,
            Box::new(|| {}),
        )
        .unwrap();
    let err = world
        .submit(
            0,
            id,
            buf.clone(),
            SharedBuffer::zeroed(256),
            64,
            Box::new(|| {}),
        )
        .unwrap_err();
    assert_eq!(err, SubmitError::DuplicateSubmission(id));
    // Complete it by submitting on the peer, then resubmitting works.
    world
        .submit(
            1,
            id,
            buf.clone(),
            SharedBuffer::zeroed(256),
            64,
            Box::new(|| {}),
        )
        .unwrap();
    world.wait_all(WAIT, None).unwrap();
    world.close();
}

#[test]
fn quit_and_restart_round_trip() {
    let cfg = Config {
        nranks: 2,
        idle_rounds_limit: 32,
        stall_rounds_limit: 8,
        ..Config::default()
    };
    let mut world = World::new(cfg);
    let id = world
        .register(
            CollectiveKind::AllReduce,
            1,
            Some(ReduceFn::Sum),
            None,
            ElemKind::Int32,
        )
        .unwrap();
    let inputs = seeded_inputs(2, 2000, 11);
    let recvs: Vec<SharedBuffer> = (0..2).map(|_| SharedBuffer::zeroed(2000 * 4)).collect();
    // Rank 0 submits alone and its daemon must eventually give up and quit.
    world
        .submit(
            0,
            id,
            SharedBuffer::from_vec(inputs[0].clone()),
            recvs[0].clone(),
            2000,
            Box::new(|| {}),
        )
        .unwrap();
    world
        .device_synchronize(0, Duration::from_secs(20))
        .expect("preemptive daemon quits instead of blocking the sync");
    assert!(world.rank(0).stats.quits.load(Ordering::Relaxed) >= 1);
    // The late peer arrives; the parked context must resume and finish.
    world
        .submit(
            1,
            id,
            SharedBuffer::from_vec(inputs[1].clone()),
            recvs[1].clone(),
            2000,
            Box::new(|| {}),
        )
        .unwrap();
    world.wait_all(WAIT, None).unwrap();
    let meta = CollectiveMeta {
        kind: CollectiveKind::AllReduce,
        nranks: 2,
        rank: 0,
        root: None,
        lanes_used: 1,
        lane_width: 32,
        reduce_fn: Some(ReduceFn::Sum),
        elem_kind: ElemKind::Int32,
    };
    let expect = reference_oracle(&meta, world.cfg.chunk_elems(), &inputs);
    for r in 0..2 {
        assert_eq!(recvs[r].snapshot(), expect[r], "rank {r}");
    }
    world.close();
}

#[test]
fn connector_audit_lossless_after_runs() {
    let cfg = Config {
        nranks: 4,
        spin: ccl_core::stickiness::SpinPolicy::constant(16),
        ..Config::default()
    };
    let nranks = cfg.nranks;
    let mut world = World::new(cfg);
    let id = world
        .register(
            CollectiveKind::AllReduce,
            1,
            Some(ReduceFn::Sum),
            None,
            ElemKind::Int32,
        )
        .unwrap();
    let inputs = seeded_inputs(nranks, 3000, 17);
    for r in 0..nranks {
        world
            .submit(
                r,
                id,
                SharedBuffer::from_vec(inputs[r as usize].clone()),
                SharedBuffer::zeroed(3000 * 4),
                3000,
                Box::new(|| {}),
            )
            .unwrap();
    }
    world.wait_all(WAIT, None).unwrap();
    for audit in world.connector_audits() {
        assert_eq!(audit.committed, audit.popped, "{audit:?}");
        assert!(audit.max_occupancy <= audit.capacity as u64, "{audit:?}");
    }
    world.close();
}
