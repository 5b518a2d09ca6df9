//! Mixture-of-experts Conformer encoders: a small autodiff engine, top-2
//! routed expert layers, the cascaded streaming encoder, closed-form
//! parameter accounting and a synthetic-task training harness.

pub mod accounting;
pub mod config;
pub mod conformer;
pub mod error;
pub mod graph;
pub mod harness;
pub mod moe;
pub mod nn;
pub mod params;
pub mod sequence;
pub mod tensor;

pub use error::{Error, Result};
