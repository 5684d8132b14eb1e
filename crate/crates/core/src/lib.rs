//! Masked action-chunk fine-tuning and prefix-preserved sampling for small
//! flow-matching policies, evaluated in a deterministic async-inference
//! simulator.

pub mod adapters;
pub mod envs;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod policy;
pub mod remac;
pub mod runtime;
pub mod sampler;

pub use error::{Error, Result};
