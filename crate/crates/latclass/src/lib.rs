//! File formats, experiment harness and command-line support for `latclass-core`.

pub mod checkpoint;
pub mod data;
pub mod metrics;
pub mod runspec;
pub mod synthetic;
pub mod plot;
pub mod harness;
pub mod cli;
