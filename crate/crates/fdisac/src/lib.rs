//! Simulator and optimization library for a full-duplex integrated
//! sensing-and-communication (ISAC) system with movable antennas.
//!
//! A full-duplex base station with movable transmit/receive antennas serves
//! downlink and uplink users while probing a sensing target; a second,
//! receive-only base station captures the reflected echo. The library models
//! every channel in that system as a differentiable function of the antenna
//! positions, exposes the downlink/uplink rates and the echo SINR, and
//! maximizes the log-domain echo SINR under power, QoS, and antenna-geometry
//! constraints with a gradient-based meta-learning optimizer plus classical
//! and fixed-antenna baselines.
//!
//! Start with [`config::ScenarioConfig`] for the physical setup,
//! [`channel`] for the propagation model, [`metrics`] for the objective,
//! [`gml`] for the optimizer, and [`harness`] for reproducible experiment
//! sweeps. The `book/` directory contains a guide whose code snippets are
//! compiled and run as doc-tests of the [`guide`] module.

pub mod baselines;
pub mod channel;
pub mod config;
pub mod constraints;
pub mod diffcore;
pub mod error;
pub mod gml;
pub mod guide;
pub mod harness;
pub mod metrics;

pub use error::{Error, Result};
