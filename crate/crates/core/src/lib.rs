//! Shared-battery ("cloud storage") toolkit.
//!
//! Households lease virtual batteries from an operator and dispatch them
//! against a time-of-use tariff; the operator sizes and runs one physical
//! battery that follows the aggregate of those virtual schedules, settling
//! any mismatch against external resources. The crate covers the household
//! optimization, the operator's sizing and profit accounting, blocking and
//! multiplexing metrics, coordination with a congestion-management
//! envelope, synthetic cohort generation and an end-to-end experiment
//! runner.

// Validation uses `!(x >= 0.0)` on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregate;
pub mod battery;
pub mod billing;
pub mod costmodel;
pub mod data;
pub mod error;
pub mod experiment;
pub mod household;
pub mod metrics;
pub mod multiservice;
pub mod series;
pub mod tariff;

pub use battery::{BatterySpec, DispatchResult};
pub use error::{Error, ErrorKind, Result};
pub use series::{HourlySeries, Unit};
pub use tariff::Tariff;
