//! Experiment orchestration over the core library: configurations, trained
//! artifact pooling, training phases, measurement probes, ablation grids
//! and serialized run reports.

pub mod ablate;
pub mod config;
pub mod pool;
pub mod probes;
pub mod report;
pub mod train;
