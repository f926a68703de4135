//! Benchmark harness for Markov chain importance sampling.
//!
//! An experiment is described by one TOML file ([`config::ExperimentConfig`]).
//! [`experiment::run_experiment`] runs seeded repetitions and writes raw
//! per-step estimates, seed-averaged windowed error curves and a metadata
//! file; [`sweep::scaling_sweep`] maps final error against acceptance rate;
//! [`costs::bench_costs`] compares the runtime cost model with measured
//! runtimes; [`dump::dump_traces`] writes raw chain traces.

pub mod config;
pub mod costs;
pub mod curves;
pub mod dump;
pub mod error;
pub mod experiment;
pub mod setup;
pub mod sweep;

pub use config::ExperimentConfig;
pub use error::{BenchError, Result};
