//! Collective registration and chunk/slice geometry.
//!
//! Every collective is registered ahead of use on each participating rank
//! with identical meta (except for the rank field) and receives a unique id.
//! The geometry planner turns a payload size into the (loop, chunk, slice)
//! hierarchy that the primitive engine, the ring sequences, and the
//! reference oracle all share.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::RegistryError;

pub type CollectiveId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectiveKind {
    AllReduce,
    AllGather,
    ReduceScatter,
    Broadcast,
    Reduce,
}

impl CollectiveKind {
    /// Kinds whose per-loop work is split into one chunk per rank; the rest
    /// run as a chain moving one chunk per loop.
    pub fn is_per_rank_chunk(self) -> bool {
        matches!(
            self,
            CollectiveKind::AllReduce | CollectiveKind::AllGather | CollectiveKind::ReduceScatter
        )
    }

    pub fn is_rooted(self) -> bool {
        matches!(self, CollectiveKind::Broadcast | CollectiveKind::Reduce)
    }

    pub fn is_reducing(self) -> bool {
        matches!(
            self,
            CollectiveKind::AllReduce | CollectiveKind::ReduceScatter | CollectiveKind::Reduce
        )
    }
}

impl std::str::FromStr for CollectiveKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "allreduce" | "all_reduce" => Ok(CollectiveKind::AllReduce),
            "allgather" | "all_gather" => Ok(CollectiveKind::AllGather),
            "reducescatter" | "reduce_scatter" => Ok(CollectiveKind::ReduceScatter),
            "broadcast" => Ok(CollectiveKind::Broadcast),
            "reduce" => Ok(CollectiveKind::Reduce),
            other => Err(format!("unknown collective kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReduceFn {
    Sum,
    Prod,
    Min,
    Max,
}

impl ReduceFn {
    pub const ALL: [ReduceFn; 4] = [ReduceFn::Sum, ReduceFn::Prod, ReduceFn::Min, ReduceFn::Max];
}

impl std::str::FromStr for ReduceFn {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sum" => Ok(ReduceFn::Sum),
            "prod" => Ok(ReduceFn::Prod),
            "min" => Ok(ReduceFn::Min),
            "max" => Ok(ReduceFn::Max),
            other => Err(format!("unknown reduce fn {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElemKind {
    Int32,
    Int64,
    Float32,
}

impl ElemKind {
    pub fn size(self) -> usize {
        match self {
            ElemKind::Int32 | ElemKind::Float32 => 4,
            ElemKind::Int64 => 8,
        }
    }
}

/// Registered configuration of one collective on one rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectiveMeta {
    pub kind: CollectiveKind,
    pub nranks: u32,
    pub rank: u32,
    pub root: Option<u32>,
    /// Grid-size analog: how many lanes execute this collective.
    pub lanes_used: u32,
    /// Block-size analog; recorded for fidelity, no execution effect.
    pub lane_width: u32,
    pub reduce_fn: Option<ReduceFn>,
    pub elem_kind: ElemKind,
}

impl CollectiveMeta {
    pub fn validate(&self, device_lanes: u32) -> Result<(), RegistryError> {
        if self.nranks == 0 {
            return Err(RegistryError::InvalidMeta("nranks must be positive".into()));
        }
        if self.rank >= self.nranks {
            return Err(RegistryError::InvalidMeta(format!(
                "rank {} out of range for nranks {}",
                self.rank, self.nranks
            )));
        }
        if self.lanes_used == 0 || self.lanes_used > device_lanes {
            return Err(RegistryError::InvalidMeta(format!(
                "lanes_used {} outside [1, {device_lanes}]",
                self.lanes_used
            )));
        }
        match (self.kind.is_rooted(), self.root) {
            (true, None) => {
                return Err(RegistryError::InvalidMeta(
                    "rooted kind without root".into(),
                ))
            }
            (true, Some(r)) if r >= self.nranks => {
                return Err(RegistryError::InvalidMeta(format!(
                    "root {r} out of range for nranks {}",
                    self.nranks
                )));
            }
            (false, Some(_)) => {
                return Err(RegistryError::InvalidMeta(
                    "root given for unrooted kind".into(),
                ))
            }
            _ => {}
        }
        if self.kind.is_reducing() && self.reduce_fn.is_none() {
            return Err(RegistryError::InvalidMeta(
                "reducing kind without reduce_fn".into(),
            ));
        }
        Ok(())
    }
}

/// Per-lane execution geometry for one submission.
///
/// The lane partition is a contiguous range of the payload basis: the input
/// element count for all kinds except all-gather, where the basis is the
/// per-rank input and the covered cells span the n-times-larger output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPlan {
    pub slice_elems: usize,
    pub slices_per_chunk: usize,
    pub chunk_elems: usize,
    pub loop_elems: usize,
    pub num_loops: usize,
    /// Size of the final slice of the lane partition (slice_elems when the
    /// partition divides evenly, 0 for an empty partition).
    pub tail_slice_elems: usize,
    /// Start of this lane's partition in basis elements.
    pub part_start: usize,
    pub part_elems: usize,
}

impl ChunkPlan {
    pub fn part_range(&self) -> Range<usize> {
        self.part_start..self.part_start + self.part_elems
    }
}

/// Contiguous lane partition: ceil(count / lanes_used) elements per lane,
/// the last lane shorter (possibly empty).
pub fn lane_partition(count: usize, lanes_used: u32, lane: u32) -> Range<usize> {
    let per = count.div_ceil(lanes_used as usize).max(1);
    let start = (lane as usize * per).min(count);
    let end = ((lane as usize + 1) * per).min(count);
    start..end
}

/// Deterministic pure function of its arguments and the global slice
/// configuration.
pub fn plan_geometry(
    meta: &CollectiveMeta,
    elem_count: usize,
    lane_index: u32,
    cfg: &Config,
) -> ChunkPlan {
    assert!(elem_count >= 1, "elem_count must be positive");
    assert!(lane_index < meta.lanes_used, "lane outside lanes_used");
    let slice_elems = cfg.slice_elems;
    let chunk_elems = cfg.chunk_elems();
    let n = meta.nranks as usize;
    let part = lane_partition(elem_count, meta.lanes_used, lane_index);
    let part_elems = part.len();
    let (loop_elems, loops_basis) = match meta.kind {
        // One pass of the sequence moves chunk_elems of every rank's chunk.
        CollectiveKind::AllReduce | CollectiveKind::ReduceScatter => (
            chunk_elems * n,
            part_elems.div_ceil((chunk_elems * n).max(1)),
        ),
        // One pass moves chunk_elems of each rank's input block; the basis
        // partition is over the per-rank input.
        CollectiveKind::AllGather => (chunk_elems * n, part_elems.div_ceil(chunk_elems)),
        // Chain kinds move one chunk per pass.
        CollectiveKind::Broadcast | CollectiveKind::Reduce => {
            (chunk_elems, part_elems.div_ceil(chunk_elems))
        }
    };
    let num_loops = loops_basis.max(1);
    let tail_slice_elems = if part_elems == 0 {
        0
    } else {
        let rem = part_elems % slice_elems;
        if rem == 0 {
            slice_elems
        } else {
            rem
        }
    };
    ChunkPlan {
        slice_elems,
        slices_per_chunk: cfg.slices_per_chunk,
        chunk_elems,
        loop_elems,
        num_loops,
        tail_slice_elems,
        part_start: part.start,
        part_elems,
    }
}

/// One registered collective.
#[derive(Debug, Clone, Serialize)]
pub struct Registered {
    pub id: CollectiveId,
    pub meta: CollectiveMeta,
}

/// Per-rank collective registry. Safe for concurrent readers behind the
/// runtime's lock; issued ids are stable for the process lifetime.
#[derive(Debug)]
pub struct Registry {
    device_lanes: u32,
    max: usize,
    entries: Vec<Registered>,
}

impl Registry {
    pub fn new(device_lanes: u32, max: usize) -> Self {
        Registry {
            device_lanes,
            max,
            entries: Vec::new(),
        }
    }

    /// Re-registering identical meta always issues a fresh id.
    pub fn register(&mut self, meta: CollectiveMeta) -> Result<CollectiveId, RegistryError> {
        meta.validate(self.device_lanes)?;
        if self.entries.len() >= self.max {
            return Err(RegistryError::RegistryFull(self.max));
        }
        let id = self.entries.len() as CollectiveId;
        self.entries.push(Registered { id, meta });
        Ok(id)
    }

    pub fn get(&self, id: CollectiveId) -> Option<&Registered> {
        self.entries.get(id as usize)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// JSON snapshot for the harness's trace files.
    pub fn snapshot_json(&self) -> String {
        #[derive(Serialize)]
        struct Row<'a> {
            id: CollectiveId,
            kind: CollectiveKind,
            nranks: u32,
            rank: u32,
            root: Option<u32>,
            lanes_used: u32,
            reduce_fn: &'a Option<ReduceFn>,
            elem_kind: ElemKind,
        }
        let rows: Vec<Row> = self
            .entries
            .iter()
            .map(|r| Row {
                id: r.id,
                kind: r.meta.kind,
                nranks: r.meta.nranks,
                rank: r.meta.rank,
                root: r.meta.root,
                lanes_used: r.meta.lanes_used,
                reduce_fn: &r.meta.reduce_fn,
                elem_kind: r.meta.elem_kind,
            })
            .collect();
        serde_json::to_string_pretty(&rows).expect("snapshot serialization")
    }
}
