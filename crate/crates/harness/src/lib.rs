//! Experiment harness: configs, simulated timing, the SGD baseline, metrics
//! and the run pipeline behind the `fedacnnl` binary.

pub mod config;
pub mod timing;
pub mod fedavg;
pub mod metrics;
pub mod runner;
