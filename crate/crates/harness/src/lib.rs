//! Scenario harness for the collective-communication runtime: benchmark
//! sweeps, deadlock reproductions with a non-preemptive baseline mode, and
//! scheduling-trace export.

pub mod output;
pub mod scenario;
pub mod spec;

pub use output::{BenchRow, Format, ScenarioOutcome, TraceReport};
pub use scenario::{run_bench, run_depletion, run_misorder, run_syncop, run_trace};
pub use spec::{size_sweep, ScenarioSpec};
