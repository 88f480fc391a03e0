//! Randomized invariant checks for the connector, the value kernels, the
//! partitioning helpers, and the end-to-end runtime.

use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Duration;

use ccl_core::buffer::SharedBuffer;
use ccl_core::config::{Config, CqImpl};
use ccl_core::connector::{Connector, PopOutcome, PushOutcome};
use ccl_core::registry::{lane_partition, CollectiveKind, CollectiveMeta, ElemKind, ReduceFn};
use ccl_core::ring::{reference_oracle, rs_output_elems};
use ccl_core::runtime::World;
use ccl_core::stickiness::{boosted_threshold, SpinPolicy};
use ccl_core::values::{bytes_to_i32s, i32s_to_bytes, reduce_bytes};
use proptest::prelude::*;

proptest! {
    /// The connector is a strict FIFO: any single-owner interleave of pushes
    /// and pops observes payloads in push order, never exceeds capacity, and
    /// reports sequence numbers that count each side monotonically.
    #[test]
    fn connector_fifo_model(
        capacity in 1usize..9,
        ops in proptest::collection::vec(any::<(bool, u8)>(), 0..120),
    ) {
        let conn = Connector::new(capacity);
        conn.bind_owner(1);
        let mut model: std::collections::VecDeque<Vec<u8>> = Default::default();
        let mut next_payload = 0u64;
        for (is_push, salt) in ops {
            if is_push {
                let payload = next_payload.to_le_bytes().to_vec();
                match conn.try_push(1, &payload) {
                    PushOutcome::Committed(seq) => {
                        prop_assert_eq!(seq, next_payload);
                        model.push_back(payload);
                        next_payload += 1;
                    }
                    PushOutcome::Full => {
                        prop_assert_eq!(model.len(), capacity, "spurious Full");
                    }
                }
            } else {
                let _ = salt;
                match conn.try_pop(1) {
                    PopOutcome::Slice(payload, seq) => {
                        let expect = model.pop_front();
                        prop_assert_eq!(Some(&payload), expect.as_ref());
                        prop_assert_eq!(seq, next_payload - model.len() as u64 - 1);
                    }
                    PopOutcome::Empty => prop_assert!(model.is_empty(), "spurious Empty"),
                }
            }
            prop_assert!(conn.max_occupancy() <= capacity as u64);
        }
        prop_assert_eq!(
            conn.write_cursor() - conn.read_cursor(),
            model.len() as u64
        );
    }

    /// Lane partitions tile the element range: disjoint, contiguous, and in
    /// lane order, with no element lost or duplicated.
    #[test]
    fn lane_partitions_tile_the_range(count in 0usize..10_000, lanes in 1u32..9) {
        let mut at = 0usize;
        for lane in 0..lanes {
            let part = lane_partition(count, lanes, lane);
            prop_assert_eq!(part.start, at);
            prop_assert!(part.end >= part.start);
            at = part.end;
        }
        prop_assert_eq!(at, count);
    }

    /// Value kernels: sum/min/max on int32 are commutative, length-preserving,
    /// and agree with scalar arithmetic (sum wraps like the device would).
    #[test]
    fn reduce_bytes_matches_scalar(
        a in proptest::collection::vec(any::<i32>(), 0..64),
        f in prop_oneof![
            Just(ReduceFn::Sum), Just(ReduceFn::Prod),
            Just(ReduceFn::Min), Just(ReduceFn::Max)
        ],
    ) {
        let b: Vec<i32> = a.iter().map(|x| x.rotate_left(7)).collect();
        let ab = reduce_bytes(ElemKind::Int32, f, &i32s_to_bytes(&a), &i32s_to_bytes(&b));
        let ba = reduce_bytes(ElemKind::Int32, f, &i32s_to_bytes(&b), &i32s_to_bytes(&a));
        prop_assert_eq!(&ab, &ba, "not commutative");
        let got = bytes_to_i32s(&ab);
        prop_assert_eq!(got.len(), a.len());
        for i in 0..a.len() {
            let want = match f {
                ReduceFn::Sum => a[i].wrapping_add(b[i]),
                ReduceFn::Prod => a[i].wrapping_mul(b[i]),
                ReduceFn::Min => a[i].min(b[i]),
                ReduceFn::Max => a[i].max(b[i]),
            };
            prop_assert_eq!(got[i], want);
        }
    }

    /// Boosting never lowers a threshold and respects the cap.
    #[test]
    fn boost_is_monotone_and_capped(current in 1u64..1_000_000) {
        let policy = SpinPolicy::default();
        let b = boosted_threshold(current, &policy);
        prop_assert!(b >= current.min(policy.boost_cap));
        prop_assert!(b <= current.max(policy.boost_cap));
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 10, ..ProptestConfig::default() })]

    /// End-to-end: random shape, random spin budget, random CQ variant — the
    /// recv buffers always match the single-threaded oracle.
    #[test]
    fn randomized_runs_match_oracle(
        nranks in 1u32..5,
        kind_ix in 0usize..5,
        elem_count in 1usize..3000,
        threshold in prop_oneof![Just(4u64), Just(64), Just(1024), Just(8192)],
        cq_ix in 0usize..3,
        seed in any::<u64>(),
    ) {
        let kinds = [
            CollectiveKind::AllReduce,
            CollectiveKind::AllGather,
            CollectiveKind::ReduceScatter,
            CollectiveKind::Broadcast,
            CollectiveKind::Reduce,
        ];
        let kind = kinds[kind_ix];
        let reduce_fn = kind.is_reducing().then_some(ReduceFn::Sum);
        let root = kind.is_rooted().then_some(seed as u32 % nranks);
        let cfg = Config {
            nranks,
            spin: SpinPolicy::constant(threshold),
            cq_impl: [CqImpl::Vanilla, CqImpl::Packed, CqImpl::Slot][cq_ix],
            ..Config::default()
        };
        let chunk_elems = cfg.chunk_elems();
        let mut world = World::new(cfg);
        let id = world.register(kind, 1, reduce_fn, root, ElemKind::Int32).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        use rand::{Rng, SeedableRng};
        let inputs: Vec<Vec<u8>> = (0..nranks)
            .map(|_| i32s_to_bytes(&(0..elem_count).map(|_| rng.gen_range(-500..500)).collect::<Vec<i32>>()))
            .collect();
        let meta0 = CollectiveMeta {
            kind, nranks, rank: 0, root,
            lanes_used: 1, lane_width: 32, reduce_fn, elem_kind: ElemKind::Int32,
        };
        let done = Arc::new(std::sync::atomic::AtomicU64::new(0));
        let mut recvs = vec![];
        for r in 0..nranks {
            // Output size is rank-dependent for reduce-scatter.
            let meta_r = CollectiveMeta { rank: r, ..meta0.clone() };
            let recv_len = match kind {
                CollectiveKind::AllGather => nranks as usize * elem_count * 4,
                CollectiveKind::ReduceScatter => rs_output_elems(&meta_r, elem_count, chunk_elems) * 4,
                _ => elem_count * 4,
            };
            let recv = SharedBuffer::zeroed(recv_len);
            recvs.push(recv.clone());
            let done = Arc::clone(&done);
            world
                .submit(r, id, SharedBuffer::from_vec(inputs[r as usize].clone()), recv, elem_count,
                    Box::new(move || { done.fetch_add(1, Ordering::SeqCst); }))
                .unwrap();
        }
        world.wait_all(Duration::from_secs(60), None).unwrap();
        prop_assert_eq!(done.load(Ordering::SeqCst), nranks as u64);
        let expect = reference_oracle(&meta0, chunk_elems, &inputs);
        for r in 0..nranks as usize {
            let got = recvs[r].snapshot();
            if expect[r].is_empty() {
                prop_assert!(got.iter().all(|&b| b == 0));
            } else {
                prop_assert_eq!(&got, &expect[r], "{:?} n={} count={} rank {}", kind, nranks, elem_count, r);
            }
        }
        for audit in world.connector_audits() {
            prop_assert_eq!(audit.committed, audit.popped);
            prop_assert!(audit.max_occupancy <= audit.capacity as u64);
        }
        world.close();
    }
}
