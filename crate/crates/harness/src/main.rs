//! `cclrun`: run one scenario of the simulated collective runtime and emit
//! CSV or JSON metrics. Deadlock scenarios exit nonzero when they fail.

use std::io::Write;
use std::path::PathBuf;
use std::time::Duration;

use anyhow::{Context, Result};
use ccl_harness::output::{write_bench, write_outcome, write_trace, Format};
use ccl_harness::{run_bench, run_depletion, run_misorder, run_syncop, run_trace, ScenarioSpec};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "cclrun",
    about = "Scenario runner for the simulated collective runtime"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Bandwidth/latency sweep, oracle-checked.
    Bench(Opts),
    /// Adversarial submission orders across ranks.
    Misorder(Opts),
    /// Stream-slot exhaustion with misordered work.
    Depletion(Opts),
    /// Submit/synchronize/submit interleaving across two ranks.
    Syncop(Opts),
    /// Scheduling trace with one delayed rank.
    Trace(Opts),
}

#[derive(Args)]
struct Opts {
    #[arg(long, default_value_t = 4)]
    ranks: u32,
    #[arg(long, default_value_t = 1)]
    lanes: u32,
    /// allreduce | allgather | reducescatter | broadcast | reduce
    #[arg(long, default_value = "allreduce")]
    kind: String,
    #[arg(long, default_value = "sum")]
    op: String,
    #[arg(long, default_value_t = 256)]
    minbytes: usize,
    #[arg(long, default_value_t = 4096)]
    maxbytes: usize,
    #[arg(long, default_value_t = 2)]
    stepfactor: usize,
    #[arg(long, default_value_t = 5)]
    iters: u64,
    /// Concurrent collectives (misorder, trace).
    #[arg(long, default_value_t = 8)]
    collectives: usize,
    /// fifo | priority
    #[arg(long = "order-policy", default_value = "fifo")]
    order_policy: String,
    #[arg(long = "spin-base", default_value_t = 4096)]
    spin_base: u64,
    #[arg(long = "spin-step", default_value_t = 256)]
    spin_step: u64,
    #[arg(long = "spin-min", default_value_t = 64)]
    spin_min: u64,
    /// Threshold multiplier applied after successful steps (1 = no boost).
    #[arg(long, default_value_t = 2)]
    boost: u64,
    /// Fetch from the SQ every round instead of using the stickiness gate.
    #[arg(long = "eager-fetch", default_value_t = false)]
    eager_fetch: bool,
    /// vanilla | packed | slot
    #[arg(long = "cq-impl", default_value = "vanilla")]
    cq_impl: String,
    /// occl | baseline
    #[arg(long, default_value = "occl")]
    mode: String,
    /// Baseline-mode stream slots per rank (depletion's S).
    #[arg(long, default_value_t = 2)]
    slots: u32,
    /// Rank whose submissions are delayed (trace).
    #[arg(long = "delay-rank")]
    delay_rank: Option<u32>,
    /// Delay applied to the delayed rank, milliseconds.
    #[arg(long = "delay-ms", default_value_t = 20)]
    delay_ms: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Watchdog in seconds; scenarios failing to finish in time fail.
    #[arg(long, default_value_t = 60)]
    watchdog: u64,
    /// Output path (stdout when omitted). Trace also writes `<out>.jsonl`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// csv | json
    #[arg(long, default_value = "csv")]
    format: String,
}

impl Opts {
    fn to_spec(&self) -> Result<ScenarioSpec> {
        fn err(field: &'static str) -> impl Fn(String) -> anyhow::Error {
            move |e| anyhow::anyhow!("--{field}: {e}")
        }
        Ok(ScenarioSpec {
            ranks: self.ranks,
            lanes: self.lanes,
            kind: self.kind.parse().map_err(err("kind"))?,
            op: self.op.parse().map_err(err("op"))?,
            minbytes: self.minbytes,
            maxbytes: self.maxbytes,
            stepfactor: self.stepfactor,
            iters: self.iters,
            collectives: self.collectives,
            order_policy: self.order_policy.parse().map_err(err("order-policy"))?,
            spin: ccl_core::stickiness::SpinPolicy {
                base_threshold: self.spin_base,
                position_step: self.spin_step,
                min_threshold: self.spin_min,
                boost_factor: self.boost.max(1),
                boost_cap: self.spin_base.saturating_mul(4).max(self.spin_base),
            },
            eager_fetch: self.eager_fetch,
            cq_impl: self.cq_impl.parse().map_err(err("cq-impl"))?,
            mode: self.mode.parse().map_err(err("mode"))?,
            stream_slots: self.slots,
            delay_rank: self.delay_rank,
            delay: Duration::from_millis(self.delay_ms),
            seed: self.seed,
            watchdog: Duration::from_secs(self.watchdog),
            ..ScenarioSpec::default()
        })
    }

    fn format(&self) -> Result<Format> {
        self.format
            .parse()
            .map_err(|e: String| anyhow::anyhow!("--format: {e}"))
    }

    fn writer(&self) -> Result<Box<dyn Write>> {
        Ok(match &self.out {
            Some(path) => Box::new(
                std::fs::File::create(path)
                    .with_context(|| format!("create {}", path.display()))?,
            ),
            None => Box::new(std::io::stdout()),
        })
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let opts = match &cli.cmd {
        Cmd::Bench(o) | Cmd::Misorder(o) | Cmd::Depletion(o) | Cmd::Syncop(o) | Cmd::Trace(o) => o,
    };
    let spec = opts.to_spec()?;
    let format = opts.format()?;
    let mut out = opts.writer()?;
    let passed = match &cli.cmd {
        Cmd::Bench(_) => {
            let rows = run_bench(&spec)?;
            write_bench(&rows, format, &mut out)?;
            true
        }
        Cmd::Misorder(_) => {
            let outcome = run_misorder(&spec)?;
            write_outcome(&outcome, format, &mut out)?;
            outcome.passed
        }
        Cmd::Depletion(_) => {
            let outcome = run_depletion(&spec)?;
            write_outcome(&outcome, format, &mut out)?;
            outcome.passed
        }
        Cmd::Syncop(_) => {
            let outcome = run_syncop(&spec)?;
            write_outcome(&outcome, format, &mut out)?;
            outcome.passed
        }
        Cmd::Trace(_) => {
            let report = run_trace(&spec)?;
            write_trace(&report, format, &mut out)?;
            if let Some(path) = &opts.out {
                let jsonl = path.with_extension("jsonl");
                std::fs::write(&jsonl, &report.events_jsonl)
                    .with_context(|| format!("write {}", jsonl.display()))?;
            }
            true
        }
    };
    if !passed {
        std::process::exit(1);
    }
    Ok(())
}
