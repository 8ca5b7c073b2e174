//! Benchmark harness for token merging on the toy diffusion U-Net: config
//! resolution, run and sweep execution, and report writing behind the
//! `tomesd-bench` command.

pub mod cli;
pub mod config;
pub mod error;
pub mod report;
pub mod runner;

pub use config::HarnessConfig;
pub use error::BenchError;
