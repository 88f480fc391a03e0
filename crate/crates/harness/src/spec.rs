//! Scenario parameterization shared by the CLI and the test suites.

use std::time::Duration;

use ccl_core::config::{Config, CqImpl, Mode};
use ccl_core::registry::{CollectiveKind, ReduceFn};
use ccl_core::stickiness::{OrderPolicy, SpinPolicy};

/// Full description of one scenario run. The seed determines every
/// submission schedule and every injected delay; two runs with the same spec
/// produce the same payloads and the same pass/fail verdict.
#[derive(Debug, Clone)]
pub struct ScenarioSpec {
    pub ranks: u32,
    pub lanes: u32,
    pub kind: CollectiveKind,
    pub op: ReduceFn,
    /// Size sweep in bytes: minbytes, minbytes*stepfactor, ... ≤ maxbytes.
    pub minbytes: usize,
    pub maxbytes: usize,
    pub stepfactor: usize,
    pub iters: u64,
    /// Concurrent collectives in the misorder and trace scenarios.
    pub collectives: usize,
    pub order_policy: OrderPolicy,
    pub spin: SpinPolicy,
    pub eager_fetch: bool,
    pub cq_impl: CqImpl,
    pub mode: Mode,
    /// Baseline-mode concurrent stream slots per rank.
    pub stream_slots: u32,
    pub idle_rounds_limit: u64,
    pub stall_rounds_limit: u64,
    /// Rank whose submissions are delayed in the trace scenario.
    pub delay_rank: Option<u32>,
    pub delay: Duration,
    pub seed: u64,
    /// Overall wall-clock budget; exceeding it is a scenario failure.
    pub watchdog: Duration,
    /// Declare deadlock after this long without any world-wide progress.
    pub quiescence: Duration,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            ranks: 4,
            lanes: 1,
            kind: CollectiveKind::AllReduce,
            op: ReduceFn::Sum,
            minbytes: 256,
            maxbytes: 4096,
            stepfactor: 2,
            iters: 5,
            collectives: 8,
            order_policy: OrderPolicy::Fifo,
            spin: SpinPolicy::default(),
            eager_fetch: false,
            cq_impl: CqImpl::Vanilla,
            mode: Mode::Occl,
            stream_slots: 2,
            idle_rounds_limit: 256,
            stall_rounds_limit: 64,
            delay_rank: None,
            delay: Duration::from_millis(20),
            seed: 0,
            watchdog: Duration::from_secs(60),
            quiescence: Duration::from_secs(2),
        }
    }
}

impl ScenarioSpec {
    pub fn config(&self) -> Config {
        Config {
            nranks: self.ranks,
            lanes: self.lanes,
            mode: self.mode,
            stream_slots: self.stream_slots,
            order_policy: self.order_policy,
            spin: self.spin,
            eager_fetch: self.eager_fetch,
            idle_rounds_limit: self.idle_rounds_limit,
            stall_rounds_limit: self.stall_rounds_limit,
            cq_impl: self.cq_impl,
            ..Config::default()
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        size_sweep(self.minbytes, self.maxbytes, self.stepfactor)
    }
}

/// Geometric size sweep in bytes, inclusive of `min`, capped at `max`.
pub fn size_sweep(min: usize, max: usize, factor: usize) -> Vec<usize> {
    let factor = factor.max(2);
    let mut sizes = Vec::new();
    let mut s = min.max(1);
    while s <= max {
        sizes.push(s);
        match s.checked_mul(factor) {
            Some(next) => s = next,
            None => break,
        }
    }
    if sizes.is_empty() {
        sizes.push(min.max(1));
    }
    sizes
}
