//! Benchmark harness for the incremental engine: synthetic event scenes,
//! sliding-window replay in dense, incremental or paired mode, and sweeps.

pub mod run;
pub mod synth;

pub use run::{run, sweep, write_sweep_csv, BenchReport, Mode, RunConfig, StepRecord, Summary, SweepParam, SweepRow};
pub use synth::{generate, SceneConfig};
