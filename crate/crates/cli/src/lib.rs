//! Experiment plumbing for the `sslkit` command: configuration, datasets,
//! checkpoints, the phase pipeline, sweeps and CSV reports.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod pipeline;
pub mod report;
pub mod sweep;
