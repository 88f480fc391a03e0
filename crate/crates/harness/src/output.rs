//! Metrics records and CSV/JSON emission.
//!
//! CSV column orders are fixed:
//! - bench rows: `kind,nranks,bytes,lat,algbw,preemptions`
//!   (lat in seconds, algbw in bytes per second)
//! - trace rows: `record,id,index,value` where `record` is `preempt`
//!   (id = collective, value = preemption count summed over ranks) or
//!   `queue` (id = rank, index = fetch ordinal, value = queue length).

use std::io::Write;

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(format!("unknown format {other:?}")),
        }
    }
}

pub const BENCH_CSV_HEADER: &str = "kind,nranks,bytes,lat,algbw,preemptions";

/// One bench sweep point, averaged over the configured iterations.
#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub kind: String,
    pub nranks: u32,
    pub bytes: usize,
    /// Average submit-to-completion latency, seconds.
    pub lat: f64,
    /// Algorithm bandwidth, bytes per second.
    pub algbw: f64,
    /// Preemptions recorded across all ranks during this point.
    pub preemptions: u64,
}

pub fn write_bench<W: Write>(rows: &[BenchRow], format: Format, mut w: W) -> std::io::Result<()> {
    match format {
        Format::Csv => {
            writeln!(w, "{BENCH_CSV_HEADER}")?;
            for r in rows {
                writeln!(
                    w,
                    "{},{},{},{:.9},{:.3},{}",
                    r.kind, r.nranks, r.bytes, r.lat, r.algbw, r.preemptions
                )?;
            }
        }
        Format::Json => {
            serde_json::to_writer_pretty(&mut w, rows)?;
            writeln!(w)?;
        }
    }
    Ok(())
}

/// Verdict of a deadlock scenario (misorder, depletion, syncop).
#[derive(Debug, Clone, Serialize)]
pub struct ScenarioOutcome {
    pub scenario: String,
    pub mode: String,
    pub passed: bool,
    /// Failure cause or completion note, human-readable.
    pub detail: String,
    pub preemptions: u64,
    pub elapsed_secs: f64,
}

pub fn write_outcome<W: Write>(
    outcome: &ScenarioOutcome,
    format: Format,
    mut w: W,
) -> std::io::Result<()> {
    match format {
        Format::Csv => {
            writeln!(w, "scenario,mode,passed,detail,preemptions,elapsed")?;
            writeln!(
                w,
                "{},{},{},{:?},{},{:.3}",
                outcome.scenario,
                outcome.mode,
                outcome.passed,
                outcome.detail,
                outcome.preemptions,
                outcome.elapsed_secs
            )?;
        }
        Format::Json => {
            serde_json::to_writer_pretty(&mut w, outcome)?;
            writeln!(w)?;
        }
    }
    Ok(())
}

/// Scheduling trace of one run: preemption counts per collective and the
/// task-queue length observed at every SQ fetch, per rank.
#[derive(Debug, Clone, Serialize)]
pub struct TraceReport {
    /// (collective id, preemptions summed over ranks), in id order.
    pub preemptions_per_collective: Vec<(u32, u64)>,
    /// Queue length at each fetch, one series per rank.
    pub queue_series: Vec<Vec<usize>>,
    pub max_queue_len: Vec<u64>,
    pub median_preemptions: f64,
    /// The structured event log, one JSON object per line.
    #[serde(skip)]
    pub events_jsonl: String,
}

impl TraceReport {
    pub fn max_queue_len_overall(&self) -> u64 {
        self.max_queue_len.iter().copied().max().unwrap_or(0)
    }
}

pub fn write_trace<W: Write>(
    report: &TraceReport,
    format: Format,
    mut w: W,
) -> std::io::Result<()> {
    match format {
        Format::Csv => {
            writeln!(w, "record,id,index,value")?;
            for (id, count) in &report.preemptions_per_collective {
                writeln!(w, "preempt,{id},0,{count}")?;
            }
            for (rank, series) in report.queue_series.iter().enumerate() {
                for (ix, len) in series.iter().enumerate() {
                    writeln!(w, "queue,{rank},{ix},{len}")?;
                }
            }
        }
        Format::Json => {
            serde_json::to_writer_pretty(&mut w, report)?;
            writeln!(w)?;
        }
    }
    Ok(())
}

/// Median of a slice (mean of the middle pair for even lengths).
pub fn median(values: &[u64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid] as f64
    } else {
        (v[mid - 1] + v[mid]) as f64 / 2.0
    }
}
