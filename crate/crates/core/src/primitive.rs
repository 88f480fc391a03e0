//! The primitive engine: executes one fused step of a collective at slice
//! granularity under a spin budget, leaving behind a dynamic context from
//! which execution can resume anywhere, including between the pop and push
//! halves of a single slice.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::buffer::SharedBuffer;
use crate::connector::{Connector, PopOutcome, PushOutcome};
use crate::error::CorruptContext;
use crate::registry::{ChunkPlan, CollectiveId, CollectiveMeta, ElemKind, ReduceFn};
use crate::ring::{step_geometry, SequencePlan, StepKind};
use crate::values::reduce_bytes;

/// Fused primitive kinds sufficient for the five ring collectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PrimitiveKind {
    Send,
    Recv,
    CopySend,
    RecvCopySend,
    RecvReduceSend,
    RecvReduceCopy,
    RecvReduceCopySend,
}

impl PrimitiveKind {
    pub fn has_send(self) -> bool {
        !matches!(self, PrimitiveKind::Recv | PrimitiveKind::RecvReduceCopy)
    }

    pub fn has_recv(self) -> bool {
        !matches!(self, PrimitiveKind::Send | PrimitiveKind::CopySend)
    }

    pub fn has_reduce(self) -> bool {
        matches!(
            self,
            PrimitiveKind::RecvReduceSend
                | PrimitiveKind::RecvReduceCopy
                | PrimitiveKind::RecvReduceCopySend
        )
    }

    /// Whether the kind reads the local send buffer.
    pub fn needs_local(self) -> bool {
        matches!(self, PrimitiveKind::Send | PrimitiveKind::CopySend) || self.has_reduce()
    }

    /// Whether the kind writes the local recv buffer.
    pub fn writes_recv_buf(self) -> bool {
        matches!(
            self,
            PrimitiveKind::Recv
                | PrimitiveKind::CopySend
                | PrimitiveKind::RecvCopySend
                | PrimitiveKind::RecvReduceCopy
                | PrimitiveKind::RecvReduceCopySend
        )
    }
}

/// Pure mapping from a primitive kind and its inputs to the data written to
/// the recv buffer and the data pushed downstream.
pub fn apply_action_set(
    kind: PrimitiveKind,
    incoming: Option<&[u8]>,
    local: Option<&[u8]>,
    reduce_fn: Option<ReduceFn>,
    elem_kind: ElemKind,
) -> (Option<Vec<u8>>, Option<Vec<u8>>) {
    debug_assert_eq!(
        kind.has_recv(),
        incoming.is_some(),
        "incoming iff recv action"
    );
    debug_assert_eq!(
        kind.needs_local(),
        local.is_some(),
        "local iff send-from-local or reduce"
    );
    let reduced = || {
        reduce_bytes(
            elem_kind,
            reduce_fn.expect("reducing primitive without reduce_fn"),
            incoming.unwrap(),
            local.unwrap(),
        )
    };
    match kind {
        PrimitiveKind::Send => (None, Some(local.unwrap().to_vec())),
        PrimitiveKind::Recv => (Some(incoming.unwrap().to_vec()), None),
        PrimitiveKind::CopySend => {
            let l = local.unwrap().to_vec();
            (Some(l.clone()), Some(l))
        }
        PrimitiveKind::RecvCopySend => {
            let i = incoming.unwrap().to_vec();
            (Some(i.clone()), Some(i))
        }
        PrimitiveKind::RecvReduceSend => (None, Some(reduced())),
        PrimitiveKind::RecvReduceCopy => (Some(reduced()), None),
        PrimitiveKind::RecvReduceCopySend => {
            let r = reduced();
            (Some(r.clone()), Some(r))
        }
    }
}

/// Resumable execution cursor of one (collective, lane).
///
/// `pending_send` carries a computed slice whose downstream push has not
/// committed yet; holding it here is what lets a preemption land between the
/// committed pop and the pending push without re-reading the connector.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DynamicContext {
    pub loop_id: usize,
    pub step_id: usize,
    pub slice_id: usize,
    /// Consecutive failed connector attempts since the last success.
    pub spins_used: u64,
    /// Set when any connector attempt succeeded since the daemon cleared it;
    /// drives lazy context saving.
    pub progressed: bool,
    pub pending_send: Option<Vec<u8>>,
    /// Per-step transfer counters, accumulated over loops.
    pub pushes_per_step: Vec<u64>,
    pub pops_per_step: Vec<u64>,
    pub pushes_total: u64,
    pub pops_total: u64,
}

impl DynamicContext {
    pub fn fresh(steps: usize) -> Self {
        DynamicContext {
            pushes_per_step: vec![0; steps],
            pops_per_step: vec![0; steps],
            ..Default::default()
        }
    }
}

/// Immutable configuration of one submitted execution on one lane.
pub struct StaticContext {
    pub id: CollectiveId,
    pub meta: CollectiveMeta,
    pub plan: ChunkPlan,
    pub seq: SequencePlan,
    pub send_buf: SharedBuffer,
    pub recv_buf: SharedBuffer,
    pub elem_count: usize,
    pub reduce_fn: Option<ReduceFn>,
    pub root: Option<u32>,
    pub send_conn: Option<Arc<Connector>>,
    pub recv_conn: Option<Arc<Connector>>,
    pub lane: u32,
    /// Connector cursor snapshots at admission; every push/pop sequence
    /// number is audited against these plus the context's own counters.
    pub send_base_seq: u64,
    pub recv_base_seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    StepDone,
    Stalled(u64),
    CollectiveDone,
}

fn corrupt(sctx: &StaticContext, detail: String) -> CorruptContext {
    CorruptContext {
        collective: sctx.id,
        detail,
    }
}

/// Run the current step, one connector interaction per inner iteration,
/// until the step completes or `spin_budget` consecutive attempts failed.
pub fn exec_step(
    sctx: &StaticContext,
    dctx: &mut DynamicContext,
    spin_budget: u64,
) -> Result<StepOutcome, CorruptContext> {
    assert!(spin_budget > 0, "spin budget must be positive");
    let esize = sctx.meta.elem_kind.size();
    loop {
        if dctx.loop_id >= sctx.plan.num_loops {
            return Ok(StepOutcome::CollectiveDone);
        }
        if dctx.step_id >= sctx.seq.steps.len() {
            return Err(corrupt(
                sctx,
                format!("step_id {} outside sequence", dctx.step_id),
            ));
        }
        let step = &sctx.seq.steps[dctx.step_id];
        let geom = step_geometry(&sctx.meta, &sctx.plan, sctx.elem_count, step, dctx.loop_id);
        let slices = geom.len.div_ceil(sctx.plan.slice_elems.max(1));
        if dctx.slice_id > slices {
            return Err(corrupt(
                sctx,
                format!(
                    "slice_id {} beyond {} planned slices",
                    dctx.slice_id, slices
                ),
            ));
        }
        if dctx.slice_id == slices {
            // Step complete; advance the cursor and report the boundary.
            dctx.slice_id = 0;
            dctx.step_id += 1;
            if dctx.step_id == sctx.seq.steps.len() {
                dctx.step_id = 0;
                dctx.loop_id += 1;
                if dctx.loop_id == sctx.plan.num_loops {
                    return Ok(StepOutcome::CollectiveDone);
                }
            }
            return Ok(StepOutcome::StepDone);
        }

        let off = dctx.slice_id * sctx.plan.slice_elems;
        let slen = (geom.len - off).min(sctx.plan.slice_elems);
        let src_range = geom
            .src
            .as_ref()
            .map(|r| (r.start + off) * esize..(r.start + off + slen) * esize);
        let dst_range = geom
            .dst
            .as_ref()
            .map(|r| (r.start + off) * esize..(r.start + off + slen) * esize);

        let kind = match step.kind {
            StepKind::LocalCopy => {
                let src = src_range.expect("local copy without source");
                let dst = dst_range.expect("local copy without destination");
                let data = sctx.send_buf.read(src.start, src.len());
                sctx.recv_buf.write(dst.start, &data);
                dctx.progressed = true;
                dctx.slice_id += 1;
                continue;
            }
            StepKind::Prim(kind) => kind,
        };

        if dctx.pending_send.is_none() {
            let incoming = if kind.has_recv() {
                let conn = sctx
                    .recv_conn
                    .as_ref()
                    .expect("recv step without connector");
                match conn.try_pop(sctx.id) {
                    PopOutcome::Empty => {
                        dctx.spins_used += 1;
                        if dctx.spins_used >= spin_budget {
                            return Ok(StepOutcome::Stalled(dctx.spins_used));
                        }
                        continue;
                    }
                    PopOutcome::Slice(payload, seq) => {
                        assert_eq!(
                            seq,
                            sctx.recv_base_seq + dctx.pops_total,
                            "recv sequence audit failed"
                        );
                        assert_eq!(
                            payload.len(),
                            slen * esize,
                            "incoming slice length mismatch"
                        );
                        dctx.spins_used = 0;
                        dctx.progressed = true;
                        dctx.pops_total += 1;
                        dctx.pops_per_step[dctx.step_id] += 1;
                        Some(payload)
                    }
                }
            } else {
                None
            };
            let local = if kind.needs_local() {
                let src = src_range.clone().expect("local input without source range");
                Some(sctx.send_buf.read(src.start, src.len()))
            } else {
                None
            };
            let (to_dst, to_send) = apply_action_set(
                kind,
                incoming.as_deref(),
                local.as_deref(),
                sctx.reduce_fn,
                sctx.meta.elem_kind,
            );
            if let Some(data) = &to_dst {
                let dst = dst_range.clone().expect("copy output without destination");
                sctx.recv_buf.write(dst.start, data);
            }
            if step.local_copy {
                // Root of a broadcast chain: the outgoing slice also lands
                // in the local recv buffer.
                if let Some(data) = &to_send {
                    let dst = dst_range.clone().expect("local copy without destination");
                    sctx.recv_buf.write(dst.start, data);
                }
            }
            match to_send {
                Some(data) if kind.has_send() => dctx.pending_send = Some(data),
                _ => {
                    dctx.slice_id += 1;
                    continue;
                }
            }
        }

        let payload = dctx.pending_send.as_ref().expect("pending push");
        let conn = sctx
            .send_conn
            .as_ref()
            .expect("send step without connector");
        match conn.try_push(sctx.id, payload) {
            PushOutcome::Full => {
                dctx.spins_used += 1;
                if dctx.spins_used >= spin_budget {
                    return Ok(StepOutcome::Stalled(dctx.spins_used));
                }
            }
            PushOutcome::Committed(seq) => {
                assert_eq!(
                    seq,
                    sctx.send_base_seq + dctx.pushes_total,
                    "send sequence audit failed"
                );
                dctx.pending_send = None;
                dctx.spins_used = 0;
                dctx.progressed = true;
                dctx.pushes_total += 1;
                dctx.pushes_per_step[dctx.step_id] += 1;
                dctx.slice_id += 1;
            }
        }
    }
}

/// Expected per-step push/pop totals for a full execution of `sctx`'s plan.
pub fn expected_transfers(sctx: &StaticContext) -> (Vec<u64>, Vec<u64>) {
    let mut pushes = vec![0u64; sctx.seq.steps.len()];
    let mut pops = vec![0u64; sctx.seq.steps.len()];
    for loop_id in 0..sctx.plan.num_loops {
        for (idx, step) in sctx.seq.steps.iter().enumerate() {
            let geom = step_geometry(&sctx.meta, &sctx.plan, sctx.elem_count, step, loop_id);
            let slices = geom.len.div_ceil(sctx.plan.slice_elems.max(1)) as u64;
            if let StepKind::Prim(kind) = step.kind {
                if kind.has_send() {
                    pushes[idx] += slices;
                }
                if kind.has_recv() {
                    pops[idx] += slices;
                }
            }
        }
    }
    (pushes, pops)
}
