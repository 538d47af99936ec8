//! Fault-aware partitioning of quantized DNNs across edge accelerators.
//!
//! A fixed-point inference engine with bit-flip fault injection scores how
//! much accuracy a layer-to-device mapping loses when some devices are
//! fault-prone. NSGA-II trades that loss against latency and energy taken from
//! per-layer profiling tables, and an online loop re-optimizes when the
//! observed accuracy drop crosses a threshold.

pub mod cli;
pub mod config;
pub mod cost;
pub mod error;
pub mod experiments;
pub mod fault;
pub mod inference;
pub mod model;
pub mod nsga2;
pub mod online;
pub mod partition;
pub mod quant;

pub use error::{Error, Result};
