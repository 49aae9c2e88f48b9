//! Deterministic desk-scale simulator for device-heterogeneous federated
//! learning in the small-to-large regime.
//!
//! The crate provides block-wise model partitioning with rolling schedules
//! and weighted-broadcast aggregation, next to the fixed-window, rolling-window
//! and random-dropout baselines, plus a minimal trainable CNN/MLP family, data
//! sharding, a parameter-coverage analyzer and an experiment CLI.

pub mod aggregate;
pub mod cli;
pub mod config;
pub mod coverage;
pub mod data;
pub mod federation;
pub mod neural;
pub mod partition;
pub mod tensor;

pub use tensor::{ChannelSelection, Tensor};
