//! Experiment harness: configuration, artifact store, benchmark runs, and
//! report emission for the decoding-strategy benchmark.

pub mod artifacts;
pub mod bench;
pub mod config;
pub mod report;
pub mod runner;
pub mod svg;

pub use bench::{run_benchmark, BenchmarkResult};
pub use config::ExperimentConfig;
pub use report::emit_reports;
