use serde::{Deserialize, Serialize};

use crate::stickiness::{OrderPolicy, SpinPolicy};

/// Which completion-queue implementation the runtime uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CqImpl {
    /// Ring buffer with a separate valid flag per slot and explicit fences.
    Vanilla,
    /// Ring buffer packing (tail, id) into one 64-bit word per slot.
    Packed,
    /// Slot map addressed by collective id, written with compare-and-swap.
    Slot,
}

impl std::str::FromStr for CqImpl {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vanilla" => Ok(CqImpl::Vanilla),
            "packed" => Ok(CqImpl::Packed),
            "slot" => Ok(CqImpl::Slot),
            other => Err(format!("unknown cq impl {other:?}")),
        }
    }
}

/// Execution mode of the per-rank scheduler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Preemptive daemon with voluntary quit and event-driven restart.
    Occl,
    /// Non-preemptive negative control: fixed stream slots, strict in-order
    /// execution per slot, no voluntary quit while work is stuck.
    Baseline,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "occl" => Ok(Mode::Occl),
            "baseline" => Ok(Mode::Baseline),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

/// Global runtime configuration. All ranks of a run share one instance, which
/// is what keeps the stickiness policies aligned across ranks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Config {
    pub nranks: u32,
    /// Execution streams per rank, the thread-block analog.
    pub lanes: u32,
    /// Elements carried by one connector slot.
    pub slice_elems: usize,
    pub slices_per_chunk: usize,
    /// Connector ring depth in slots.
    pub connector_capacity: usize,
    pub sq_capacity: usize,
    pub cq_capacity: usize,
    pub registry_max: usize,
    /// Direct-mapped context-cache ways per lane.
    pub cache_ways: usize,
    pub mode: Mode,
    /// Baseline-mode concurrent stream slots per rank.
    pub stream_slots: u32,
    /// Spin quantum a baseline stream head gets per scheduler round.
    pub baseline_quantum: u64,
    pub order_policy: OrderPolicy,
    pub spin: SpinPolicy,
    /// Fetch from the SQ every round regardless of task-queue state.
    /// This is the pre-stickiness behavior used as the comparison policy
    /// in the trace scenario.
    pub eager_fetch: bool,
    /// Rounds without a fetched SQE before the quit condition can fire.
    pub idle_rounds_limit: u64,
    /// Consecutive zero-progress preemptions after which an entry counts as
    /// stalled for the quit and FIFO-fetch conditions.
    pub stall_rounds_limit: u64,
    pub cq_impl: CqImpl,
    /// Record the structured event log.
    pub events_enabled: bool,
}

impl Config {
    pub fn chunk_elems(&self) -> usize {
        self.slice_elems * self.slices_per_chunk
    }
}

impl Default for Config {
    fn default() -> Self {
        Config {
            nranks: 2,
            lanes: 1,
            slice_elems: 256,
            slices_per_chunk: 4,
            connector_capacity: 8,
            sq_capacity: 64,
            cq_capacity: 64,
            registry_max: 1000,
            cache_ways: 4,
            mode: Mode::Occl,
            stream_slots: 1,
            baseline_quantum: 4096,
            order_policy: OrderPolicy::Fifo,
            spin: SpinPolicy::default(),
            eager_fetch: false,
            idle_rounds_limit: 256,
            stall_rounds_limit: 64,
            cq_impl: CqImpl::Vanilla,
            events_enabled: true,
        }
    }
}
