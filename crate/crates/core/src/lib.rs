//! Compressive capture and recovery of connected-vehicle telemetry.
//!
//! Signals are thinned online by a per-sample uniform draw, stored as kept
//! values plus their positions, and recovered block by block by l1
//! minimization in the DCT domain.

pub mod error;
pub mod evaluation;
pub mod recovery;
pub mod sampler;
pub mod signal;
pub mod synth;
pub mod traffic;

pub use error::{Error, Result};
