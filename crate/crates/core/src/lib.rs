//! Generation of complete samples from tabular data with values missing at
//! random, by a kernel-estimated particle flow.
//!
//! The pipeline: [`dataset`] loads and partitions masked data by missingness
//! pattern, [`velocity`] estimates per-pattern local-linear density-ratio
//! gradients with the [`kernel`] bandwidth, and [`flow`] moves an initial
//! ensemble along their pattern-weighted average. [`simulate`] and
//! [`evaluate`] provide the synthetic benchmarks and their metrics; [`cli`]
//! binds everything into the `flowgem` command.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod flow;
pub mod kernel;
pub mod rng;
pub mod simulate;
pub mod velocity;

pub use error::{Error, Result};
