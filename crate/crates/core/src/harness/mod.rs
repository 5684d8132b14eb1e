//! Experiment harness: configuration, persistence, sweeps, metrics and plots.

pub mod commands;
pub mod config;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod plot;
pub mod sweep;
