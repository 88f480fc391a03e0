//! Ring-algorithm sequence plans and per-step data geometry.
//!
//! Every rank runs the same primitive sequence shape for its position in the
//! logical ring (send edge to rank+1, recv edge from rank-1); the chunk
//! selector says which rank-owned chunk of the current loop a step touches.
//! Rooted collectives run the ring cut at the root as a chain.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::primitive::PrimitiveKind;
use crate::registry::{lane_partition, ChunkPlan, CollectiveKind, CollectiveMeta, ReduceFn};
use crate::values::reduce_bytes;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepKind {
    Prim(PrimitiveKind),
    /// Single-rank degenerate plan: send buffer to recv buffer, no wire.
    LocalCopy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqStep {
    pub kind: StepKind,
    /// Which rank-owned chunk of the loop this step touches.
    pub chunk: u32,
    /// The outgoing slice is also written locally (broadcast root).
    pub local_copy: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequencePlan {
    pub steps: Vec<SeqStep>,
}

impl SequencePlan {
    pub fn uses_send(&self) -> bool {
        self.steps
            .iter()
            .any(|s| matches!(s.kind, StepKind::Prim(k) if k.has_send()))
    }

    pub fn uses_recv(&self) -> bool {
        self.steps
            .iter()
            .any(|s| matches!(s.kind, StepKind::Prim(k) if k.has_recv()))
    }
}

fn prim(kind: PrimitiveKind, chunk: u32) -> SeqStep {
    SeqStep {
        kind: StepKind::Prim(kind),
        chunk,
        local_copy: false,
    }
}

/// Deterministic per-rank sequence for one loop of the collective.
pub fn build_sequence(
    kind: CollectiveKind,
    nranks: u32,
    rank: u32,
    root: Option<u32>,
) -> SequencePlan {
    assert!(rank < nranks);
    let n = nranks;
    if n == 1 {
        return SequencePlan {
            steps: vec![SeqStep {
                kind: StepKind::LocalCopy,
                chunk: 0,
                local_copy: false,
            }],
        };
    }
    let modn = |x: u32| x % n;
    let steps = match kind {
        CollectiveKind::AllReduce => {
            // Reduce phase: step s touches chunk (rank - s) mod n; then the
            // gather phase redistributes the fully reduced chunks.
            let mut v = Vec::with_capacity(2 * n as usize - 1);
            v.push(prim(PrimitiveKind::Send, rank));
            for s in 1..n - 1 {
                v.push(prim(PrimitiveKind::RecvReduceSend, modn(rank + n - s)));
            }
            v.push(prim(PrimitiveKind::RecvReduceCopySend, modn(rank + 1)));
            for k in 1..n - 1 {
                v.push(prim(PrimitiveKind::RecvCopySend, modn(rank + 1 + n - k)));
            }
            v.push(prim(PrimitiveKind::Recv, modn(rank + 2)));
            v
        }
        CollectiveKind::ReduceScatter => {
            // Step s touches chunk (rank + n - 1 - s) mod n; rank r ends
            // owning the fully reduced chunk r.
            let mut v = Vec::with_capacity(n as usize);
            v.push(prim(PrimitiveKind::Send, modn(rank + n - 1)));
            for s in 1..n - 1 {
                v.push(prim(PrimitiveKind::RecvReduceSend, modn(rank + n - 1 - s)));
            }
            v.push(prim(PrimitiveKind::RecvReduceCopy, rank));
            v
        }
        CollectiveKind::AllGather => {
            // Step s forwards rank (rank - s) mod n's input block.
            let mut v = Vec::with_capacity(n as usize);
            v.push(prim(PrimitiveKind::CopySend, rank));
            for s in 1..n - 1 {
                v.push(prim(PrimitiveKind::RecvCopySend, modn(rank + n - s)));
            }
            v.push(prim(PrimitiveKind::Recv, modn(rank + 1)));
            v
        }
        CollectiveKind::Broadcast => {
            let root = root.expect("broadcast without root");
            let pos = modn(rank + n - root);
            let step = if pos == 0 {
                SeqStep {
                    kind: StepKind::Prim(PrimitiveKind::Send),
                    chunk: 0,
                    local_copy: true,
                }
            } else if pos == n - 1 {
                prim(PrimitiveKind::Recv, 0)
            } else {
                prim(PrimitiveKind::RecvCopySend, 0)
            };
            vec![step]
        }
        CollectiveKind::Reduce => {
            let root = root.expect("reduce without root");
            // Chain position counted from the leaf (root + 1); the root sits
            // at the far end and folds the final partial in.
            let pos = modn(rank + n - root + n - 1);
            let step = if pos == 0 {
                prim(PrimitiveKind::Send, 0)
            } else if pos == n - 1 {
                prim(PrimitiveKind::RecvReduceCopy, 0)
            } else {
                prim(PrimitiveKind::RecvReduceSend, 0)
            };
            vec![step]
        }
    };
    SequencePlan { steps }
}

/// Element ranges one step touches: `src` indexes the send buffer, `dst` the
/// recv buffer, both `len` elements long starting at the step's slice 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepGeometry {
    pub src: Option<Range<usize>>,
    pub dst: Option<Range<usize>>,
    pub len: usize,
}

/// Ceil-split of `range` into `n` chunk ranges; chunk `c`'s share.
fn chunk_range(range: &Range<usize>, n: usize, c: usize) -> Range<usize> {
    let per = range.len().div_ceil(n).max(1);
    let start = (range.start + c * per).min(range.end);
    let end = (range.start + (c + 1) * per).min(range.end);
    start..end
}

/// Elements of the fully reduced chunk `chunk` that sit before basis index
/// `before` in a reduce-scatter's output ordering (lane-major, loop-major).
fn rs_cells_before(
    meta: &CollectiveMeta,
    elem_count: usize,
    loop_elems: usize,
    chunk: u32,
    before: usize,
) -> usize {
    let n = meta.nranks as usize;
    let mut total = 0;
    for lane in 0..meta.lanes_used {
        let part = lane_partition(elem_count, meta.lanes_used, lane);
        let mut at = part.start;
        while at < part.end {
            if at >= before {
                return total;
            }
            let lr = at..(at + loop_elems).min(part.end);
            total += chunk_range(&lr, n, chunk as usize).len();
            at += loop_elems;
        }
    }
    total
}

/// Total recv-buffer elements a rank owns after a reduce-scatter.
pub fn rs_output_elems(meta: &CollectiveMeta, elem_count: usize, chunk_elems: usize) -> usize {
    let loop_elems = chunk_elems * meta.nranks as usize;
    rs_cells_before(meta, elem_count, loop_elems, meta.rank, usize::MAX)
}

/// Pure geometry of `step` in loop `loop_id` of this lane's plan.
pub fn step_geometry(
    meta: &CollectiveMeta,
    plan: &ChunkPlan,
    elem_count: usize,
    step: &SeqStep,
    loop_id: usize,
) -> StepGeometry {
    let part = plan.part_range();
    match meta.kind {
        CollectiveKind::AllReduce | CollectiveKind::ReduceScatter => {
            let lstart = part.start + loop_id * plan.loop_elems;
            let lr = lstart..(lstart + plan.loop_elems).min(part.end);
            let c = chunk_range(&lr, meta.nranks as usize, step.chunk as usize);
            let dst = if meta.kind == CollectiveKind::ReduceScatter {
                if matches!(step.kind, StepKind::Prim(PrimitiveKind::RecvReduceCopy))
                    || matches!(step.kind, StepKind::LocalCopy)
                {
                    let off =
                        rs_cells_before(meta, elem_count, plan.loop_elems, step.chunk, lr.start);
                    Some(off..off + c.len())
                } else {
                    None
                }
            } else {
                Some(c.clone())
            };
            StepGeometry {
                len: c.len(),
                src: Some(c),
                dst,
            }
        }
        CollectiveKind::AllGather => {
            // The basis is the per-rank input; chunk c's copy of this loop's
            // input window lands at block c of the output.
            let istart = part.start + loop_id * plan.chunk_elems;
            let iw = istart..(istart + plan.chunk_elems).min(part.end);
            let base = step.chunk as usize * elem_count;
            StepGeometry {
                len: iw.len(),
                src: Some(iw.clone()),
                dst: Some(base + iw.start..base + iw.end),
            }
        }
        CollectiveKind::Broadcast | CollectiveKind::Reduce => {
            let lstart = part.start + loop_id * plan.loop_elems;
            let lr = lstart..(lstart + plan.loop_elems).min(part.end);
            StepGeometry {
                len: lr.len(),
                src: Some(lr.clone()),
                dst: Some(lr),
            }
        }
    }
}

/// Single-threaded reference results, computed from the collective's
/// definition. Returns one expected recv-buffer image per rank; an empty
/// vector marks a buffer the collective must leave untouched (reduce
/// non-roots).
pub fn reference_oracle(
    meta: &CollectiveMeta,
    chunk_elems: usize,
    inputs: &[Vec<u8>],
) -> Vec<Vec<u8>> {
    let n = meta.nranks as usize;
    assert_eq!(inputs.len(), n);
    assert!(inputs.iter().all(|i| i.len() == inputs[0].len()));
    let esize = meta.elem_kind.size();
    let elem_count = inputs[0].len() / esize;
    let fold = |f: ReduceFn| {
        inputs[1..].iter().fold(inputs[0].clone(), |acc, x| {
            reduce_bytes(meta.elem_kind, f, &acc, x)
        })
    };
    match meta.kind {
        CollectiveKind::AllReduce => {
            let r = fold(meta.reduce_fn.unwrap());
            vec![r; n]
        }
        CollectiveKind::AllGather => {
            let cat: Vec<u8> = inputs.iter().flatten().copied().collect();
            vec![cat; n]
        }
        CollectiveKind::ReduceScatter => {
            let r = fold(meta.reduce_fn.unwrap());
            let loop_elems = chunk_elems * n;
            (0..n as u32)
                .map(|rank| {
                    // Walk the lane-major, loop-major output ordering and
                    // collect this rank's chunk cells.
                    let mut out = Vec::new();
                    for lane in 0..meta.lanes_used {
                        let part = lane_partition(elem_count, meta.lanes_used, lane);
                        let mut at = part.start;
                        while at < part.end {
                            let lr = at..(at + loop_elems).min(part.end);
                            let c = chunk_range(&lr, n, rank as usize);
                            out.extend_from_slice(&r[c.start * esize..c.end * esize]);
                            at += loop_elems;
                        }
                    }
                    out
                })
                .collect()
        }
        CollectiveKind::Broadcast => {
            let root = meta.root.unwrap() as usize;
            vec![inputs[root].clone(); n]
        }
        CollectiveKind::Reduce => {
            let root = meta.root.unwrap() as usize;
            let r = fold(meta.reduce_fn.unwrap());
            (0..n)
                .map(|i| if i == root { r.clone() } else { Vec::new() })
                .collect()
        }
    }
}
