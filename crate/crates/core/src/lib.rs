//! Appliance identification from one-period current/voltage waveforms.
//!
//! Recordings are cut into grid-period windows, normalized, and classified by
//! a one-vs-one ensemble of small tanh networks. [`harness`] runs
//! leave-house-out cross-validation and the robustness studies on top.

pub mod dataio;
pub mod ensemble;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod mlp;
pub mod signal;
pub mod synth;

pub use error::{Error, Result};
