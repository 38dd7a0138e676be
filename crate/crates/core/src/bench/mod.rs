//! Evaluation harness: runs policy conditions over held-out episodes,
//! sweeps forced cache ratios, times per-step latency and renders SVG
//! charts from the resulting CSVs.

mod plot;
mod report;
mod runner;
mod wallclock;

pub use plot::{emit_plots, line_chart, Series};
pub use report::{bench_conditions, read_rows, run_benchmark, sweep_ratio, write_rows, BenchRow, Fixture};
pub use runner::{evaluate, Condition, Evaluation, PolicyKind, Runner, StepRecord};
pub use wallclock::{median, wallclock};
