//! Benchmark harness: dataset manifests, metrics and reports.

pub mod dataset;
pub mod harness;
pub mod metrics;
