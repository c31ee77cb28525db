//! Experiment harness: configuration, multi-seed training, ablation
//! sweeps, checkpoint evaluation and report generation.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod report;
pub mod run;
