//! Distributed voltage regulation with incentive signals.
//!
//! A distribution operator publishes per-node prices derived from dual
//! multipliers of its voltage limits. Customers answer with setpoints for
//! fast inverter-interfaced PV and slow, discrete thermostatically controlled
//! loads. Slow setpoints are recovered from a convex relaxation by unbiased
//! two-point randomization.
//!
//! Layers, bottom up:
//! - [`grid`]: feeder topology, linear voltage model, AC power flow
//! - [`devices`]: device models and customer best responses
//! - [`recovery`]: discrete rate grids, randomized rounding, variance bounds
//! - [`dual`]: multipliers, signals, stepsizes and the dual function
//! - [`sim`]: two-timescale harness, centralized oracle, statistics
//! - [`scenario`]: configuration, presets, profiles and reports

// NaN-rejecting parameter checks are written as negated comparisons.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod devices;
pub mod dual;
pub mod error;
pub mod grid;
pub mod instance;
pub mod recovery;
pub mod scenario;
pub mod sim;

pub use error::{Error, ErrorKind, Result};
pub use instance::Instance;
