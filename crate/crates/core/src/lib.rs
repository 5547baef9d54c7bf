//! Hierarchical multi-distribution CTR modelling.
//!
//! Distribution features (population, scenario, traffic source, ...) are
//! embedded into `x_b` and refined by multi-level residual quantization into a
//! hierarchical vector `s_D`, which replaces `x_b` as the gate input of a
//! mixture-of-experts or dynamic-weight backbone. Everything runs in `f64`
//! with hand-written backward passes.

pub mod backbones;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embedding;
pub mod error;
pub mod experiments;
pub mod hmdrr;
pub mod model;
pub mod numeric;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
