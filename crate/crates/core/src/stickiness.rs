//! Stickiness adjustment: task-queue ordering and spin-threshold policies.
//!
//! Stickiness is how long a lane keeps waiting on a collective before
//! preempting it. It is realized by the entry's task-queue position and by
//! the spin threshold assigned to its primitives. All ranks of a run must
//! configure identical policies; that shared configuration is what lets the
//! lanes converge on the same collective without any cross-rank messages.

use serde::{Deserialize, Serialize};

/// Task-queue ordering policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrderPolicy {
    /// Append new entries at the tail; fetch from the SQ only when the queue
    /// is empty or every entry has been stalled past the stall limit.
    Fifo,
    /// Insert new entries at the head and check the SQ every round, which
    /// favors collectives submitted later.
    PriorityFront,
}

impl std::str::FromStr for OrderPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fifo" => Ok(OrderPolicy::Fifo),
            "priority" => Ok(OrderPolicy::PriorityFront),
            other => Err(format!("unknown order policy {other:?}")),
        }
    }
}

impl OrderPolicy {
    /// Rounds between SQ checks when the conditional FIFO gate is not used.
    pub fn fetch_cadence(self) -> u64 {
        match self {
            OrderPolicy::Fifo => 4,
            OrderPolicy::PriorityFront => 1,
        }
    }
}

/// Spin-threshold policy. The front of the task queue gets the base
/// threshold; each position behind it gets `position_step` less, floored at
/// `min_threshold`. A successful step multiplies the entry's threshold by
/// `boost_factor`, capped at `boost_cap`.
///
/// A constant, boost-free policy (the pre-stickiness behavior) is expressed
/// with `position_step = 0` and `boost_factor = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpinPolicy {
    pub base_threshold: u64,
    pub position_step: u64,
    pub min_threshold: u64,
    pub boost_factor: u64,
    pub boost_cap: u64,
}

impl Default for SpinPolicy {
    fn default() -> Self {
        SpinPolicy {
            base_threshold: 4096,
            position_step: 256,
            min_threshold: 64,
            boost_factor: 2,
            boost_cap: 4 * 4096,
        }
    }
}

impl SpinPolicy {
    /// A flat threshold with no position decrement and no boost.
    pub fn constant(threshold: u64) -> Self {
        SpinPolicy {
            base_threshold: threshold,
            position_step: 0,
            min_threshold: threshold,
            boost_factor: 1,
            boost_cap: threshold,
        }
    }

    pub fn is_adaptive(&self) -> bool {
        self.position_step != 0 || self.boost_factor > 1
    }
}

/// Initial spin threshold for an entry admitted at `position` in the queue.
pub fn initial_threshold(position: usize, policy: &SpinPolicy) -> u64 {
    let decrement = (position as u64).saturating_mul(policy.position_step);
    policy
        .base_threshold
        .saturating_sub(decrement)
        .max(policy.min_threshold)
}

/// Threshold after a primitive of the entry executed successfully.
pub fn boosted_threshold(current: u64, policy: &SpinPolicy) -> u64 {
    current
        .saturating_mul(policy.boost_factor.max(1))
        .min(policy.boost_cap)
        .max(policy.min_threshold)
}
