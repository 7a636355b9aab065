//! Training, evaluation and analysis of lightweight classification probes over
//! cached LLM hidden states.
//!
//! The probes read the full `layers x tokens x hidden` activation tensor of a
//! frozen backbone and reduce it in two stages (tokens within each layer, then
//! across layers) before a linear head. See [`aggregators`] for the three
//! mechanisms, [`hstore`] for the on-disk cache and [`trainer`] for the
//! training loop.

pub mod aggregators;
pub mod analysis;
pub mod bench;
pub mod error;
pub mod hstore;
pub mod metrics;
pub mod real;
pub mod synth;
pub mod trainer;

pub use error::{ProbeError, Result};
