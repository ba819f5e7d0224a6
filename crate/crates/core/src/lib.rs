//! Simulation and analysis of federated learning (FL), federated
//! distillation (FD) and their alternation (FLDA) over a multichannel
//! slotted-ALOHA network of energy-harvesting IoT devices.
//!
//! The crate is organised bottom-up:
//!
//! - [`data`]: datasets, IDX loading, synthetic tasks and non-IID partitions
//! - [`model`]: a small MLP with gradients for both learning objectives
//! - [`fed`]: aggregation, re-initialisation and the phase schedule
//! - [`phy`]: the random-access frame model with erasure-coded subpackets
//! - [`energy`]: harvesting, battery dynamics and costs
//! - [`analytic`]: closed-form access and throughput probabilities
//! - [`orchestrator`]: the slot-level protocol and run metrics
//! - [`validation`]: the acceptance checks shared by the CLI and tests

// `!(x >= lo)` is used on purpose so NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytic;
pub mod config;
pub mod data;
pub mod energy;
pub mod error;
pub mod fed;
pub mod gradcheck;
pub mod model;
pub mod orchestrator;
pub mod phy;
pub mod report;
pub mod rng;
pub mod validation;

pub use config::{Mode, SimConfig};
pub use error::{Error, Result};
pub use orchestrator::{energy_to_target, run_experiment, MetricsPoint, MetricsTrace, Simulation};
