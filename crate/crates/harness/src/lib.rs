//! Experiment harness: synthetic data, checkpoints, metrics and the
//! `draft-lab` command line.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod image_io;
pub mod manifest;
pub mod metrics;
pub mod pipeline;
